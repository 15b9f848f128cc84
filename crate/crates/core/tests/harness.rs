use std::sync::OnceLock;

use stnet::data::{generate, DataConfig, Dataset};
use stnet::harness::*;
use stnet::net::{NetConfig, StNet, Variant};
use stnet::sim::LoadCondition;
use stnet::tensor::{save_checkpoint, AdamConfig, AdamState, Graph, ParamStore, Tensor};
use stnet::Error;
use tempfile::TempDir;

fn values(p: &ParamStore) -> Vec<(String, Tensor)> {
    p.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

struct Fixture {
    _dir: TempDir,
    ds: Dataset,
    pre: Pretrained,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        generate(&DataConfig::tiny(), 5, dir.path()).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        let (tr, te) = ds.split(0).unwrap();
        let cfg = PretrainConfig {
            profile: "tiny".into(),
            epochs: 2,
            ..PretrainConfig::default()
        };
        let pre = pretrain_sfe(&ds, &cfg, &tr, &te).unwrap();
        Fixture { _dir: dir, ds, pre }
    })
}

fn tiny_cfg(variant: Variant, epochs: usize) -> TrainConfig {
    TrainConfig {
        variant,
        epochs,
        batch: 8,
        lr: 3e-3,
        seed: 2,
        profile: "tiny".into(),
        ..TrainConfig::default()
    }
}

fn run(variant: Variant, epochs: usize) -> (Trained, Vec<usize>) {
    let f = fixture();
    let (tr, te) = select_split(&f.ds, &LoadCondition::ALL, 2).unwrap();
    let enc = f.pre.encoder();
    let t = train(&f.ds, &tiny_cfg(variant, epochs), &tr, &te, Some(&enc), None).unwrap();
    (t, te)
}

#[test]
fn zero_epochs_leave_initialisation_untouched() {
    let (t, _) = run(Variant::TfeOnly, 0);
    let init = StNet::new(NetConfig::tiny(), Variant::TfeOnly).unwrap().init_params(2).unwrap();
    assert_eq!(values(&t.params), values(&init));
    assert!(t.log.is_empty());

    let (t, _) = run(Variant::Full, 0);
    for (name, w) in fixture().pre.encoder().iter() {
        assert_eq!(t.params.get(name).unwrap(), w, "{name}");
    }
}

#[test]
fn training_lowers_the_loss() {
    let (t, _) = run(Variant::FfNoattn, 6);
    let first = t.log.first().unwrap().train_loss;
    let last = t.log.last().unwrap().train_loss;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn same_seed_gives_identical_logs_and_tables() {
    let f = fixture();
    let go = || {
        let (t, te) = run(Variant::Full, 2);
        let m = evaluate(&t, &f.ds, &te, None).unwrap();
        (t.params, train_log_csv(&t.log), comparison_csv(&[("p", &m)]), load_csv(&[("p", &m)]))
    };
    let a = go();
    let b = go();
    assert_eq!(values(&a.0), values(&b.0));
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
    assert_eq!(a.3, b.3);
}

#[test]
fn evaluation_has_no_side_effects() {
    let f = fixture();
    let (t, te) = run(Variant::Full, 1);
    let before = t.params.clone();
    let a = evaluate(&t, &f.ds, &te, None).unwrap();
    let b = evaluate(&t, &f.ds, &te, None).unwrap();
    assert_eq!(a, b);
    assert_eq!(t.params, before);
    assert!(matches!(evaluate(&t, &f.ds, &[], None), Err(Error::Contract(_))));
}

#[test]
fn run_round_trips_through_disk() {
    let f = fixture();
    let (t, te) = run(Variant::Full, 1);
    let dir = TempDir::new().unwrap();
    let cfg = tiny_cfg(Variant::Full, 1);
    save_run(dir.path(), &t, &cfg, &LoadCondition::ALL).unwrap();
    let (back, info) = load_run(dir.path()).unwrap();
    assert_eq!(info.train, cfg);
    assert_eq!(info.loads, LoadCondition::ALL.to_vec());
    assert_eq!(
        predict(&t, &f.ds, &te, None).unwrap(),
        predict(&back, &f.ds, &te, None).unwrap()
    );

    // A checkpoint from another variant must be rejected, not silently used.
    let (other, _) = run(Variant::TfeOnly, 0);
    save_checkpoint(&other.params, &dir.path().join(MODEL_FILE)).unwrap();
    assert!(matches!(load_run(dir.path()), Err(Error::Config(_))));
}

#[test]
fn pretrained_checkpoint_reproduces_final_val_loss() {
    let f = fixture();
    let (tr, te) = f.ds.split(0).unwrap();
    // A single validation image makes the logged mean order-independent.
    let cfg = PretrainConfig {
        profile: "tiny".into(),
        epochs: 1,
        val_images: 1,
        ..PretrainConfig::default()
    };
    let val = [te[3]];
    let p = pretrain_sfe(&f.ds, &cfg, &tr, &val).unwrap();
    assert_eq!(p.log.len(), 2);
    assert_eq!(p.log[0].phase, Phase::Warmup);
    assert_eq!(p.log[1].phase, Phase::Composite);

    let dir = TempDir::new().unwrap();
    save_pretrained(dir.path(), &p, &cfg).unwrap();
    let (ae, phi) = load_pretrained(dir.path()).unwrap();
    assert_eq!(values(&ae), values(&p.autoencoder));
    let net = StNet::new(NetConfig::tiny(), Variant::SfeOnly).unwrap();
    let img = f.ds.samples[val[0]].load_image().unwrap();
    let loss = reconstruction_loss(&net, &ae, Some(&phi), &[img], &cfg).unwrap();
    assert_eq!(loss.to_bits(), p.log[1].val_loss.to_bits());
    assert_eq!(values(&load_encoder(dir.path()).unwrap()), values(&p.encoder()));
}

#[test]
fn adam_solves_a_convex_linear_probe() {
    // y = x·W* + b*, full batch: a strictly convex quadratic in (W, b).
    let w_true = [0.5, -1.5, 2.0];
    let xs: Vec<[f64; 3]> = (0..16).map(|i| {
        let t = i as f64;
        [(0.3 * t).sin(), (0.7 * t).cos(), 0.1 * t - 0.8]
    }).collect();
    let ys: Vec<f64> = xs.iter().map(|x| x.iter().zip(&w_true).map(|(a, b)| a * b).sum::<f64>() + 0.25).collect();

    let mut p = ParamStore::new();
    p.insert("w", Tensor::zeros(&[3, 1])).unwrap();
    p.insert("b", Tensor::zeros(&[1])).unwrap();
    let mut opt = AdamState::new(&p);
    let cfg = AdamConfig::with_lr(0.02);
    let mut losses = Vec::new();
    for _ in 0..2000 {
        p.zero_grads();
        let mut total = 0.0;
        for (x, &y) in xs.iter().zip(&ys) {
            let mut g = Graph::new();
            let xv = g.input(Tensor::from_vec(x.to_vec()));
            let w = g.param(&p, "w").unwrap();
            let b = g.param(&p, "b").unwrap();
            let out = g.linear(xv, w, b).unwrap();
            let yv = g.input(Tensor::from_vec(vec![y]));
            let l = g.mse(out, yv).unwrap();
            total += g.value(l).data()[0];
            g.backward(l, &mut p, 1.0 / xs.len() as f64).unwrap();
        }
        losses.push(total / xs.len() as f64);
        opt.step(&mut p, &cfg).unwrap();
    }
    assert!(losses[..40].windows(2).all(|w| w[1] < w[0]), "early loss not monotone");
    assert!(*losses.last().unwrap() < 1e-8 * losses[0], "{}", losses.last().unwrap());
    for (got, want) in p.get("w").unwrap().data().iter().zip(w_true) {
        assert!((got - want).abs() < 1e-3);
    }
}

#[test]
fn constant_baseline_rmse_is_population_std() {
    let f = fixture();
    let idx: Vec<usize> = (0..f.ds.len()).collect();
    let m = constant_baseline(&f.ds, &idx, &idx).unwrap();
    for (k, row) in m.per_marker.iter().enumerate() {
        for a in 0..3 {
            let v: Vec<f64> = f.ds.samples.iter().map(|s| s.points[k][a]).collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
            assert!((row[a].rmse - sd).abs() <= 1e-9 * sd.max(1.0), "marker {k} axis {a}");
        }
    }
}

#[test]
fn mismatched_configuration_is_rejected() {
    let f = fixture();
    let (tr, te) = f.ds.split(0).unwrap();
    let enc = f.pre.encoder();
    let desk = TrainConfig { profile: "desk".into(), ..tiny_cfg(Variant::TfeOnly, 1) };
    assert!(matches!(train(&f.ds, &desk, &tr, &te, None, None), Err(Error::Config(_))));
    let no_encoder = tiny_cfg(Variant::Full, 1);
    assert!(matches!(train(&f.ds, &no_encoder, &tr, &te, None, None), Err(Error::Config(_))));
    let net = StNet::new(NetConfig::desk(), Variant::Full).unwrap();
    assert!(matches!(check_encoder(&net, &enc), Err(Error::Config(_))));
    let bad_lr = TrainConfig { lr: 0.0, ..tiny_cfg(Variant::TfeOnly, 1) };
    assert!(matches!(train(&f.ds, &bad_lr, &tr, &te, None, None), Err(Error::Config(_))));
    assert!(matches!(train(&f.ds, &tiny_cfg(Variant::TfeOnly, 1), &[], &te, None, None), Err(Error::Contract(_))));
}

#[test]
fn ablation_covers_every_variant_on_one_split() {
    let f = fixture();
    let base = tiny_cfg(Variant::Full, 1);
    let entries = ablate(&f.ds, &base, &[LoadCondition::None, LoadCondition::Fe2], &f.pre.encoder(), None).unwrap();
    assert_eq!(entries.iter().map(|e| e.variant).collect::<Vec<_>>(), Variant::ALL.to_vec());
    for e in &entries {
        let loads: Vec<_> = e.metrics.per_load.iter().map(|(l, _)| *l).collect();
        assert_eq!(loads, vec![LoadCondition::None, LoadCondition::Fe2]);
    }
    let cols: Vec<(&str, &MetricsTable)> = entries.iter().map(|e| (e.variant.display_name(), &e.metrics)).collect();
    let table = load_table(&cols);
    assert!(table.lines().count() == 3, "{table}");
}

#[test]
fn reconstruction_of_ground_truth_is_close() {
    let spec = DataConfig::desk().robot;
    for q in envelope(&spec, 3, 4) {
        for load in LoadCondition::ALL {
            let l = load.load();
            let p = stnet::sim::marker_positions(&q, &l, &spec).unwrap();
            let r = reconstruct(&p, &q, &l, &spec).unwrap();
            assert!(r.mean_error < 0.5 && r.max_error >= r.mean_error, "{load:?} {r:?}");
            assert_eq!(r.curve.base(), [0.0; 3]);
        }
    }
}
