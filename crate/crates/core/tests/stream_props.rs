mod common;

use emg_intent::model::{ModelParams, PositionalEncoding};
use emg_intent::signal::Recording;
use emg_intent::stream::*;
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_model(t: usize) -> ModelParams {
    let hyper = emg_intent::model::Hyper {
        d_model: 8,
        heads: 2,
        layers: 1,
        ff_dim: 16,
        dropout: 0.0,
        window_len: t,
        channels: 2,
        classes: 3,
        positional: PositionalEncoding::Sinusoidal,
    };
    ModelParams::init(hyper, &mut ChaCha8Rng::seed_from_u64(7)).unwrap()
}

fn random_recording(n: usize, seed: u64) -> Recording {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = Array2::from_shape_simple_fn((n, 2), || rng.gen_range(0.0..1.0));
    let names = vec!["relax".to_string(), "open".into(), "close".into()];
    Recording::new("s", "r", 200, samples, vec![0; n], names).unwrap()
}

fn cfg(t: usize, lookahead: usize) -> StreamConfig {
    StreamConfig { window_len: t, lookahead, hold: 4, inference_stride: 3, ..Default::default() }
}

#[test]
fn decisions_read_nothing_past_the_lookahead() {
    let model = small_model(24);
    let rec = random_recording(160, 1);
    for l in [0, 5, 12] {
        let c = cfg(24, l);
        let p = run_stream(&rec, &model, &c, false).unwrap();
        for d in &p.decisions {
            assert!(d.max_sample_read <= d.t + l);
        }
    }
}

#[test]
fn labels_depend_only_on_the_causal_range() {
    let model = small_model(24);
    let rec = random_recording(160, 2);
    let c = cfg(24, 9);
    let base = run_stream(&rec, &model, &c, true).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for d in base.decisions.iter().step_by(5) {
        // scramble everything outside (t − T, t + ℓ]
        let mut other = rec.clone();
        for (i, mut row) in other.samples.outer_iter_mut().enumerate() {
            if i > d.t + 9 || i + 24 <= d.t {
                row.mapv_inplace(|_| rng.gen_range(0.0..1.0));
            }
        }
        let p = run_stream(&other, &model, &c, true).unwrap();
        let same = p.decisions.iter().find(|x| x.t == d.t).unwrap();
        assert_eq!(same.logits, d.logits, "decision at {}", d.t);
    }
}

#[test]
fn default_cadence_is_ten_hertz() {
    let c = StreamConfig::default();
    assert_eq!(c.update_rate_hz(), 10.0);
    assert!((c.latency_bound_s() - 0.35).abs() < 1e-12);
    assert_eq!(c.window_ends(1000, 5000).count(), 6);
}

#[test]
fn one_window_paths_agree() {
    let model = small_model(24);
    let rec = random_recording(120, 4);
    let zero = StreamConfig { lookahead: 0, ..cfg(24, 0) };
    let short = StreamConfig { lookahead: 2, inference_stride: 5, ..cfg(24, 0) };
    let a = run_stream(&rec, &model, &zero, false).unwrap();
    let b = run_stream(&rec, &model, &short, false).unwrap();
    assert_eq!(a.labels, b.labels);
}

#[test]
fn hold_discipline_and_warmup() {
    let model = small_model(24);
    let rec = random_recording(150, 5);
    let c = cfg(24, 6);
    let p = run_stream(&rec, &model, &c, false).unwrap();
    assert_eq!(p.warmup_end, 23);
    assert!(p.labels[..23].iter().all(Option::is_none));
    for d in &p.decisions {
        let end = (d.t + c.hold).min(150);
        assert!(p.labels[d.t..end].iter().all(|&l| l == Some(d.label)));
    }
    let delay = p.worst_case_delay().unwrap();
    assert!(delay <= c.lookahead + c.hold);
}

#[test]
fn prediction_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let model = small_model(24);
    let rec = random_recording(100, 6);
    for logits in [false, true] {
        let p = run_stream(&rec, &model, &cfg(24, 6), logits).unwrap();
        let path = dir.path().join("p.csv");
        save_predictions(&p, &path).unwrap();
        let back = load_predictions(&path).unwrap();
        assert_eq!(back.labels, p.labels);
        assert_eq!(back.logits, p.logits);
        assert_eq!(back.config, p.config);
        assert_eq!(back.warmup_end, p.warmup_end);
    }
}

proptest! {
    #[test]
    fn agreeing_windows_decide_their_class(class in 0usize..4, rows in proptest::collection::vec(proptest::collection::vec(0.0f64..10.0, 4), 1..7), boost in 0.01f64..100.0) {
        let agreed: Vec<Array1<f64>> = rows.into_iter().map(|mut r| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            r[class] = m + boost;
            Array1::from(r)
        }).collect();
        let (label, _) = aggregate(&agreed).unwrap();
        prop_assert_eq!(label, class);
    }
}
