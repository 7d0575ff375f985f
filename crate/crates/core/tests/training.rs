//! Probe and toy-model training behavior.

use ndarray::Array2;

use ptprobe::harness::{
    capture, ActivationTrace, PlantedConfig, PlantedModel, ProbeLocation, ProbePoint, Sublayer, ToyConfig, ToyModel,
    ToyTrainConfig, View,
};
use ptprobe::metrics::aligned_second_view_error;
use ptprobe::nn::{LrSchedule, OptimizerConfig};
use ptprobe::probe::{
    evaluate_probe, train_probe, train_probes, ProbeConfig, ProbeInit, ProbeKind, TokenSource, TraceSource, TrainConfig,
};
use ptprobe::scene::{generate_dataset, ScenePair, SceneConfig};
use ptprobe::Result;

fn planted_traces(cfg: PlantedConfig, pairs: &[ScenePair]) -> Vec<ActivationTrace> {
    let m = PlantedModel::new(cfg).unwrap();
    pairs.iter().map(|p| capture(&m, p).unwrap()).collect()
}

#[test]
fn toy_training_cuts_view1_regression_tenfold() {
    let pairs = generate_dataset(0, 8, &SceneConfig::default()).unwrap();
    let mut m = ToyModel::new(ToyConfig { dim: 32, decoder_blocks: 2, ..Default::default() }, 0).unwrap();
    let before = m.view1_regression(&pairs).unwrap();
    let cfg = ToyTrainConfig {
        steps: 600,
        batch_pairs: 2,
        optimizer: OptimizerConfig { lr: 2e-3, weight_decay: 0.0, schedule: LrSchedule::Cosine { warmup: 0.05 }, ..Default::default() },
        ..Default::default()
    };
    let report = m.train(&pairs, &cfg).unwrap();
    assert_eq!(report.losses.len(), 600);
    let after = m.view1_regression(&pairs).unwrap();
    assert!(before / after >= 10.0, "{before} -> {after}");
}

#[test]
fn least_squares_probe_decodes_noiseless_tokens() {
    let pairs = generate_dataset(10, 6, &SceneConfig::default()).unwrap();
    let cfg = PlantedConfig { post_sigma: vec![0.0; 13], pre_sigma: Some(vec![0.0; 12]), ..Default::default() };
    let traces = planted_traces(cfg, &pairs);
    let probe_cfg = ProbeConfig { kind: ProbeKind::PointmapLinear, init: ProbeInit::LeastSquares { ridge: 1e-9 }, ..Default::default() };
    let train = TrainConfig { steps: 0, ..Default::default() };
    let loc = ProbeLocation::post(3, Sublayer::Mlp);
    let out = train_probes("planted", &[loc.at(View::First), loc.at(View::Second)], &TraceSource(&traces), &pairs, &probe_cfg, &train, 1)
        .unwrap();
    assert!(out.failures.is_empty());
    let preds = evaluate_probe(&out.bank, loc, &TraceSource(&traces), &pairs).unwrap();
    for (p, pair) in preds.iter().zip(&pairs) {
        let e = aligned_second_view_error(p[1].pointmap().unwrap(), &pair.gt_pointmaps[1]).unwrap();
        assert!(e.mean < 1e-3, "{}", e.mean);
    }
}

#[test]
fn mlp_probe_loss_decreases() {
    let pairs = generate_dataset(20, 4, &SceneConfig::default()).unwrap();
    let traces = planted_traces(PlantedConfig::default(), &pairs);
    let probe_cfg = ProbeConfig { hidden_layers: 1, hidden_dim: 32, ..Default::default() };
    let train = TrainConfig { steps: 60, batch_pairs: 2, optimizer: OptimizerConfig { lr: 1e-3, ..Default::default() }, ..Default::default() };
    let t = train_probe(ProbePoint::encoder(View::First), &TraceSource(&traces), &pairs, &probe_cfg, &train).unwrap();
    let head: f64 = t.history[..5].iter().sum();
    let tail: f64 = t.history[t.history.len() - 5..].iter().sum();
    assert!(tail < head, "{head} -> {tail}");
    assert_eq!(t.probe.stats.steps, 60);
}

#[test]
fn parallel_training_matches_serial() {
    let pairs = generate_dataset(30, 3, &SceneConfig::default()).unwrap();
    let traces = planted_traces(PlantedConfig::default(), &pairs);
    let cfg = ProbeConfig { kind: ProbeKind::PointmapLinear, ..Default::default() };
    let train = TrainConfig { steps: 5, batch_pairs: 1, ..Default::default() };
    let points = [ProbePoint::encoder(View::First), ProbeLocation::post(0, Sublayer::SelfAttention).at(View::Second)];
    let a = train_probes("m", &points, &TraceSource(&traces), &pairs, &cfg, &train, 1).unwrap();
    let b = train_probes("m", &points, &TraceSource(&traces), &pairs, &cfg, &train, 2).unwrap();
    assert_eq!(a.bank, b.bank);
}

struct Poisoned<'a>(TraceSource<'a>);

impl TokenSource for Poisoned<'_> {
    fn tokens(&self, pair: usize, point: &ProbePoint) -> Result<Array2<f32>> {
        let mut t = self.0.tokens(pair, point)?;
        if point.view == View::Second {
            t[[0, 0]] = f32::NAN;
        }
        Ok(t)
    }
}

#[test]
fn diverging_probe_is_reported_without_stopping_others() {
    let pairs = generate_dataset(40, 2, &SceneConfig::default()).unwrap();
    let traces = planted_traces(PlantedConfig::default(), &pairs);
    let cfg = ProbeConfig { kind: ProbeKind::PointmapLinear, ..Default::default() };
    let train = TrainConfig { steps: 3, batch_pairs: 1, ..Default::default() };
    let points = [ProbePoint::encoder(View::First), ProbePoint::encoder(View::Second)];
    let out = train_probes("m", &points, &Poisoned(TraceSource(&traces)), &pairs, &cfg, &train, 1).unwrap();
    assert_eq!(out.failures.len(), 1);
    assert_eq!(out.failures[0].point, ProbePoint::encoder(View::Second));
    assert!(out.bank.get(&ProbePoint::encoder(View::First)).is_ok());
}
