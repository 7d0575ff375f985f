//! Minimal reverse-mode automatic differentiation over `f32` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] with seed gradients for any set of nodes propagates
//! them to every node, including the parameter leaves.

use ndarray::{s, Array2, Axis, Zip};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, inv_std: Vec<f32> },
    MulConst(Var, Array2<f32>),
    AddConst(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Array2<f32>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients for every node of a tape, indexed by [`Var`].
#[derive(Debug)]
pub struct Grads(Vec<Option<Array2<f32>>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Array2<f32>> {
        self.0[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f32>> {
        self.0[v.0].take()
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2 / pi)

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row-wise softmax; rows whose entries are all `-inf` become all zeros.
pub fn softmax_rows(x: &Array2<f32>) -> Array2<f32> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        if max == f32::NEG_INFINITY {
            row.fill(0.0);
            continue;
        }
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f32 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f32>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f32> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Array2<f32>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// Adds a `1 × m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1 × m` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, k: f32) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Row-wise standardization without affine parameters.
    pub fn layer_norm(&mut self, a: Var, eps: f32) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let n = row.len() as f32;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
            let r = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * r);
            inv_std.push(r);
        }
        self.push(out, Op::LayerNorm { x: a, inv_std })
    }

    /// Elementwise product with a constant (no gradient flows into the constant).
    pub fn mul_const(&mut self, a: Var, k: Array2<f32>) -> Var {
        let v = self.value(a) * &k;
        self.push(v, Op::MulConst(a, k))
    }

    pub fn add_const(&mut self, a: Var, k: &Array2<f32>) -> Var {
        let v = self.value(a) + k;
        self.push(v, Op::AddConst(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols { x: a, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Back-propagate the given seed gradients through the whole tape.
    pub fn backward(&self, seeds: &[(Var, Array2<f32>)]) -> Grads {
        let mut grads: Vec<Option<Array2<f32>>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            accumulate(&mut grads, *v, g.clone());
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::MulRow(a, row) => {
                    let ga = &g * self.value(*row);
                    let gr = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *row, gr);
                }
                Op::Scale(a, k) => accumulate(&mut grads, *a, &g * *k),
                Op::Relu(a) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|d, &x| {
                        if x <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Gelu(a) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|d, &x| *d *= gelu_grad(x));
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = &g * y;
                    for (mut row, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let dot: f32 = row.sum();
                        Zip::from(&mut row).and(&yrow).for_each(|d, &yv| *d -= yv * dot);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm { x, inv_std } => {
                    let xhat = &node.value;
                    let mut ga = g.clone();
                    for (r, (mut row, xrow)) in ga.rows_mut().into_iter().zip(xhat.rows()).enumerate() {
                        let n = row.len() as f32;
                        let mean_g = row.sum() / n;
                        let mean_gx = row.iter().zip(xrow.iter()).map(|(a, b)| a * b).sum::<f32>() / n;
                        let k = inv_std[r];
                        Zip::from(&mut row).and(&xrow).for_each(|d, &xh| *d = k * (*d - mean_g - xh * mean_gx));
                    }
                    accumulate(&mut grads, *x, ga);
                }
                Op::MulConst(a, k) => accumulate(&mut grads, *a, &g * k),
                Op::AddConst(a) => accumulate(&mut grads, *a, g.clone()),
                Op::SliceCols { x, start } => {
                    let mut full = Array2::zeros(self.value(*x).raw_dim());
                    full.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads, *x, full);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        accumulate(&mut grads, *p, g.slice(s![.., offset..offset + w]).to_owned());
                        offset += w;
                    }
                }
            }
            grads[i] = Some(g);
        }
        Grads(grads)
    }
}

fn accumulate(grads: &mut [Option<Array2<f32>>], v: Var, g: Array2<f32>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f32> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Checks d(sum(w ⊙ f(inputs)))/d(inputs) against central differences in f64-ish precision.
    fn grad_check(inputs: Vec<Array2<f32>>, f: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars);
        let w = rand_mat(&mut rng, tape.value(out).nrows(), tape.value(out).ncols());
        let grads = tape.backward(&[(out, w.clone())]);
        let objective = |xs: &[Array2<f32>]| -> f64 {
            let mut t = Tape::new();
            let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone())).collect();
            let o = f(&mut t, &vs);
            t.value(o).iter().zip(w.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let h = 1e-2f32;
        for (k, x) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Array2::zeros(x.raw_dim()));
            for idx in 0..x.len() {
                let (r, c) = (idx / x.ncols(), idx % x.ncols());
                let mut plus = inputs.clone();
                plus[k][[r, c]] += h;
                let mut minus = inputs.clone();
                minus[k][[r, c]] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h as f64);
                let an = analytic[[r, c]] as f64;
                assert!((fd - an).abs() <= 2e-2 * (1.0 + fd.abs()), "input {k} [{r},{c}]: fd {fd} vs analytic {an}");
            }
        }
    }

    #[test]
    fn matmul_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        grad_check(vec![rand_mat(&mut rng, 3, 4), rand_mat(&mut rng, 4, 2)], |t, v| t.matmul(v[0], v[1]));
        grad_check(vec![rand_mat(&mut rng, 3, 4), rand_mat(&mut rng, 5, 4)], |t, v| t.matmul_t(v[0], v[1]));
    }

    #[test]
    fn elementwise_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_mat(&mut rng, 3, 4);
        let row = rand_mat(&mut rng, 1, 4);
        grad_check(vec![a.clone(), row.clone()], |t, v| t.add_row(v[0], v[1]));
        grad_check(vec![a.clone(), row], |t, v| t.mul_row(v[0], v[1]));
        grad_check(vec![a.clone()], |t, v| t.gelu(v[0]));
        grad_check(vec![a.clone()], |t, v| t.scale(v[0], -1.5));
        grad_check(vec![a.clone()], |t, v| {
            let s = t.slice_cols(v[0], 1, 2);
            let r = t.relu(v[0]);
            let c = t.concat_cols(&[s, r]);
            t.mul_const(c, Array2::from_elem((3, 6), 0.5))
        });
    }

    #[test]
    fn softmax_and_layer_norm_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_mat(&mut rng, 3, 5);
        grad_check(vec![a.clone()], |t, v| t.softmax_rows(v[0]));
        grad_check(vec![a], |t, v| t.layer_norm(v[0], 1e-5));
    }

    #[test]
    fn attention_block_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_mat(&mut rng, 4, 6);
        let wq = rand_mat(&mut rng, 6, 6);
        let wk = rand_mat(&mut rng, 6, 6);
        grad_check(vec![x, wq, wk], |t, v| {
            let q = t.matmul(v[0], v[1]);
            let k = t.matmul(v[0], v[2]);
            let s = t.matmul_t(q, k);
            let a = t.softmax_rows(s);
            let o = t.matmul(a, v[0]);
            t.add(o, v[0])
        });
    }

    #[test]
    fn fully_masked_softmax_row_is_zero() {
        let x = Array2::from_shape_vec((2, 2), vec![f32::NEG_INFINITY, f32::NEG_INFINITY, 0.0, 0.0]).unwrap();
        let y = softmax_rows(&x);
        assert_eq!(y.row(0).to_vec(), vec![0.0, 0.0]);
        assert_eq!(y.row(1).to_vec(), vec![0.5, 0.5]);
    }
}
