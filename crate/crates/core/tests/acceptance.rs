//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints its verdict; pass criterion numbers to run a subset,
//! e.g. `cargo test --release --test acceptance -- 2 3`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use common::{fd_check, uniform, FdReport};
use stnet::bezier::{bernstein, fit};
use stnet::data::{audit, digest, generate, regenerate, DataConfig, Dataset, MANIFEST};
use stnet::harness::*;
use stnet::net::{
    perceptual_loss, sfe_composite_loss, ssim, DropoutKey, NetConfig, Normalizer, Perceptual, SpatialInput,
    SsimConstants, StNet, TendonWindow, Variant,
};
use stnet::sim::{marker_positions, LoadCondition, Point3};
use stnet::tensor::{init_lstm_cell, lstm_cell, Graph, ParamStore, PoolMode, Tensor, Var};

const SEEDS: [u64; 3] = [0, 1, 2];
const DESK_SEED: u64 = 1;

type Criterion = (u32, &'static str, fn() -> Verdict);

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

// ---------------------------------------------------------------- fixtures

struct Desk {
    _dir: TempDir,
    ds: Dataset,
}

fn desk() -> &'static Desk {
    static D: OnceLock<Desk> = OnceLock::new();
    D.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        generate(&DataConfig::desk(), DESK_SEED, dir.path()).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        Desk { _dir: dir, ds }
    })
}

/// Encoder pretrained on the training images of one split only, and its
/// features for every sample of that split.
fn pretrained_features(ds: &Dataset, tr: &[usize], te: &[usize], seed: u64) -> (ParamStore, FeatureCache) {
    let cfg = PretrainConfig { seed, ..PretrainConfig::default() };
    let p = pretrain_sfe(ds, &cfg, tr, &[]).unwrap();
    let enc = p.encoder();
    let all: Vec<usize> = tr.iter().chain(te).copied().collect();
    let fc = encode_features(ds, &NetConfig::desk(), &enc, &all).unwrap();
    (enc, fc)
}

struct SeedRun {
    train: Vec<usize>,
    test: Vec<usize>,
    features: FeatureCache,
    entries: Vec<AblationEntry>,
}

impl SeedRun {
    fn entry(&self, v: Variant) -> &AblationEntry {
        self.entries.iter().find(|e| e.variant == v).unwrap()
    }
}

/// Four-variant ablation on the unloaded trial, one run per seed.
fn free_space_runs() -> &'static [SeedRun] {
    static R: OnceLock<Vec<SeedRun>> = OnceLock::new();
    R.get_or_init(|| {
        let ds = &desk().ds;
        SEEDS
            .iter()
            .map(|&seed| {
                let (tr, te) = select_split(ds, &[LoadCondition::None], seed).unwrap();
                let (enc, fc) = pretrained_features(ds, &tr, &te, seed);
                let base = TrainConfig { seed, ..TrainConfig::default() };
                let entries = ablate(ds, &base, &[LoadCondition::None], &enc, Some(&fc)).unwrap();
                SeedRun { train: tr, test: te, features: fc, entries }
            })
            .collect()
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

// ---------------------------------------------------------------- criteria

fn project(g: &mut Graph, x: Var, seed: u64) -> stnet::Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let target = g.input(uniform(&shape, seed));
    g.sum_sq(x, target)
}

fn store_with(entries: &[(&str, Tensor)]) -> ParamStore {
    let mut p = ParamStore::new();
    for (k, v) in entries {
        p.insert(*k, v.clone()).unwrap();
    }
    p
}

fn gradient_integrity() -> Verdict {
    let start = Instant::now();
    let mut layers: Vec<(&str, FdReport)> = Vec::new();
    let none = ParamStore::new();

    let conv = store_with(&[("k", uniform(&[3, 3, 2, 3], 1)), ("b", uniform(&[3], 2))]);
    let mut r = FdReport::default();
    for (stride, pad) in [(1, 1), (2, 0), (2, 1)] {
        r.merge(fd_check(&conv, &[uniform(&[5, 6, 2], 3)], |g, s, x| {
            let (k, b) = (g.param(s, "k")?, g.param(s, "b")?);
            let y = g.conv2d(x[0], k, b, stride, pad)?;
            project(g, y, 9)
        }));
    }
    layers.push(("conv3x3", r));
    let att = store_with(&[("k", uniform(&[7, 7, 2, 1], 4)), ("b", uniform(&[1], 5))]);
    layers.push(("conv7x7", fd_check(&att, &[uniform(&[4, 5, 2], 6)], |g, s, x| {
        let (k, b) = (g.param(s, "k")?, g.param(s, "b")?);
        let y = g.conv2d(x[0], k, b, 1, 3)?;
        project(g, y, 7)
    })));
    layers.push(("maxpool", fd_check(&none, &[uniform(&[4, 6, 3], 11)], |g, _, x| {
        let y = g.maxpool2x2(x[0])?;
        project(g, y, 12)
    })));
    for (name, mode) in [("channel avg", PoolMode::Avg), ("channel max", PoolMode::Max)] {
        layers.push((name, fd_check(&none, &[uniform(&[3, 4, 5], 13)], |g, _, x| {
            let y = g.channel_pool(x[0], mode)?;
            project(g, y, 14)
        })));
    }
    layers.push(("upsample", fd_check(&none, &[uniform(&[2, 3, 2], 15)], |g, _, x| {
        let y = g.upsample2x(x[0])?;
        project(g, y, 16)
    })));
    let lin = store_with(&[("w", uniform(&[5, 3], 21)), ("b", uniform(&[3], 22))]);
    layers.push(("linear+activations", fd_check(&lin, &[uniform(&[5], 23)], |g, s, x| {
        let (w, b) = (g.param(s, "w")?, g.param(s, "b")?);
        let y = g.linear(x[0], w, b)?;
        let (a, t, r) = (g.sigmoid(y), g.tanh(y), g.relu(y));
        let at = g.mul(a, t)?;
        let z = g.add(at, r)?;
        let z = g.sub(z, y)?;
        let z = g.scale(z, 1.7);
        project(g, z, 24)
    })));
    layers.push(("tile/concat/gate", fd_check(
        &none,
        &[uniform(&[3, 2, 2], 31), uniform(&[4], 32), uniform(&[3, 2, 1], 33)],
        |g, _, x| {
            let tiled = g.tile(x[1], 3, 2)?;
            let f = g.concat(&[x[0], tiled])?;
            let m = g.sigmoid(x[2]);
            let y = g.mul_map(f, m)?;
            let flat = g.flatten(y)?;
            project(g, flat, 34)
        },
    )));
    layers.push(("dropout", fd_check(&none, &[uniform(&[20], 51)], |g, _, x| {
        let y = g.dropout(x[0], 0.5, true, 7, 3)?;
        project(g, y, 52)
    })));
    let mut lstm = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    init_lstm_cell(&mut lstm, "l0", 4, 3, &mut rng).unwrap();
    init_lstm_cell(&mut lstm, "l1", 3, 3, &mut rng).unwrap();
    layers.push(("lstm", fd_check(&lstm, &[uniform(&[4], 62), uniform(&[4], 63)], |g, s, x| {
        let mut h = [g.input(Tensor::zeros(&[3])), g.input(Tensor::zeros(&[3]))];
        let mut c = h;
        for &q in x {
            let (h0, c0) = lstm_cell(g, s, "l0", q, h[0], c[0])?;
            let (h1, c1) = lstm_cell(g, s, "l1", h0, h[1], c[1])?;
            h = [h0, h1];
            c = [c0, c1];
        }
        project(g, h[1], 64)
    })));
    let imgs = [uniform(&[4, 4, 3], 41).map(|v| 0.5 + 0.4 * v), uniform(&[4, 4, 3], 42).map(|v| 0.5 + 0.4 * v)];
    layers.push(("mse/sum_sq/ssim", fd_check(&none, &imgs, |g, _, x| {
        let m = g.mse(x[0], x[1])?;
        let s = g.sum_sq(x[0], x[1])?;
        let ss = g.ssim(x[0], x[1], 1e-4, 9e-4)?;
        g.weighted_sum(&[(m, 1.0), (s, 0.3), (ss, -2.0)])
    })));
    let tiny = StNet::new(NetConfig::tiny(), Variant::SfeOnly).unwrap();
    let phi = Perceptual::snapshot(&tiny.init_autoencoder(6).unwrap(), 1).unwrap();
    let target = uniform(&[8, 8, 3], 7).map(|v| 0.5 + 0.5 * v);
    layers.push(("perceptual", fd_check(&none, &[uniform(&[8, 8, 3], 8).map(|v| 0.5 + 0.5 * v)], |g, _, x| {
        let t = g.input(target.clone());
        perceptual_loss(g, &phi, x[0], t)
    })));

    let window = TendonWindow::new(
        uniform(&[3, 4], 12).data().chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect(),
    )
    .unwrap();
    let image = uniform(&[8, 8, 3], 13).map(|v| 0.5 + 0.5 * v);
    let target = uniform(&[2, 3], 14);
    for variant in Variant::ALL {
        let net = StNet::new(NetConfig::tiny(), variant).unwrap();
        let store = net.init_params(0).unwrap();
        let norm = Normalizer::identity(&net.config);
        let r = fd_check(&store, &[], |g, s, _| {
            let key = DropoutKey { train: true, seed: 5, call: 1 };
            let out = net.forward(g, s, &norm, &window, SpatialInput::Image(&image), key)?;
            let t = g.input(target.clone());
            g.mse(out.points, t)
        });
        layers.push((variant.as_str(), r));
    }

    let elapsed = start.elapsed();
    let (worst_name, worst) = layers.iter().max_by(|a, b| a.1.max_rel.total_cmp(&b.1.max_rel)).unwrap();
    let checked: usize = layers.iter().map(|l| l.1.checked).sum();
    let pass = worst.max_rel < 1e-3 && elapsed < Duration::from_secs(60);
    verdict(
        pass,
        format!(
            "{} checks over {} layers/variants, max rel err {:.2e} ({worst_name}), {:.1}s",
            checked,
            layers.len(),
            worst.max_rel,
            elapsed.as_secs_f64()
        ),
    )
}

fn de_casteljau(c: &[Point3; 5], t: f64) -> Point3 {
    let mut pts = c.to_vec();
    while pts.len() > 1 {
        pts = pts.windows(2).map(|w| [0, 1, 2].map(|a| (1.0 - t) * w[0][a] + t * w[1][a])).collect();
    }
    pts[0]
}

fn bezier_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut recover, mut ortho) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let c: [Point3; 5] = std::array::from_fn(|_| [0, 1, 2].map(|_| rng.gen_range(-100.0..100.0)));
        let m = rng.gen_range(5..20);
        let mut t: Vec<f64> = (0..m).map(|_| rng.gen_range(0.02..1.0)).collect();
        t.sort_by(f64::total_cmp);
        let clean: Vec<Point3> = t.iter().map(|&t| de_casteljau(&c, t)).collect();
        let f = fit(&clean, &t, &c[0]).unwrap();
        for (a, b) in f.control.iter().flatten().zip(c.iter().flatten()) {
            recover = recover.max((a - b).abs());
        }
        let noisy: Vec<Point3> = clean.iter().map(|p| p.map(|v| v + rng.gen_range(-2.0..2.0))).collect();
        let f = fit(&noisy, &t, &c[0]).unwrap();
        for axis in 0..3 {
            for j in 1..5 {
                let ip: f64 = t
                    .iter()
                    .zip(&noisy)
                    .map(|(&tk, p)| bernstein(tk)[j] * (p[axis] - de_casteljau(&f.control, tk)[axis]))
                    .sum();
                ortho = ortho.max(ip.abs());
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        recover < 1e-8 && ortho < 1e-8 && elapsed < Duration::from_secs(1),
        format!(
            "200 planted curves: max control error {recover:.2e}, max residual inner product {ortho:.2e}, {:.3}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn loss_identities() -> Verdict {
    let c = SsimConstants::default();
    let net = StNet::new(NetConfig::tiny(), Variant::SfeOnly).unwrap();
    let phi = Perceptual::snapshot(&net.init_autoencoder(3).unwrap(), 1).unwrap();
    let (mut composite, mut self_ssim) = (0.0f64, 0.0f64);
    for seed in 0..10 {
        let x = uniform(&[8, 8, 3], seed).map(|v| 0.5 + 0.5 * v);
        let mut g = Graph::new();
        let a = g.input(x.clone());
        let b = g.input(x.clone());
        let l = sfe_composite_loss(&mut g, a, b, Some(&phi), 0.5, 0.5, c).unwrap();
        composite = composite.max(g.value(l).data()[0].abs());
        self_ssim = self_ssim.max((ssim(&x, &x, c).unwrap() - 1.0).abs());
    }
    // Constant images: variances and covariance vanish, leaving the
    // luminance ratio (2ab + c1)/(a² + b² + c1) = 0.2801/0.5301 for a = 0.2, b = 0.7.
    let a = Tensor::full(&[6, 5, 3], 0.2);
    let b = Tensor::full(&[6, 5, 3], 0.7);
    let hand = 0.2801 / 0.5301;
    let constant = (ssim(&a, &b, c).unwrap() - hand).abs();
    verdict(
        composite == 0.0 && self_ssim == 0.0 && constant < 1e-12,
        format!("|L(x,x)| = {composite:e}, |SSIM(x,x) − 1| = {self_ssim:e}, constant-image deviation {constant:.1e}"),
    )
}

fn dataset_audit() -> Verdict {
    let d = desk();
    let report = audit(&d.ds).unwrap();
    let copy = TempDir::new().unwrap();
    regenerate(&d.ds.root.join(MANIFEST), copy.path()).unwrap();
    let (a, b) = (digest(&d.ds.root).unwrap(), digest(copy.path()).unwrap());
    verdict(
        report.passed() && report.checked == d.ds.len() && a == b,
        format!(
            "{}/{} samples consistent (max deviation {:.1e}); regenerated digest {}",
            report.checked - report.mismatched.len(),
            d.ds.len(),
            report.max_deviation,
            if a == b { "identical" } else { "DIFFERS" }
        ),
    )
}

fn ablation_ordering() -> Verdict {
    let runs = free_space_runs();
    let rmse = |v: Variant| -> Vec<f64> { runs.iter().map(|r| r.entry(v).metrics.overall.rmse).collect() };
    let (full, ff, tfe, sfe) = (rmse(Variant::Full), rmse(Variant::FfNoattn), rmse(Variant::TfeOnly), rmse(Variant::SfeOnly));
    let uni: Vec<f64> = tfe.iter().zip(&sfe).map(|(a, b)| a.min(*b)).collect();
    let first = (0..3).filter(|&i| full[i] < ff[i]).count();
    let second = (0..3).filter(|&i| ff[i] < uni[i]).count();
    let (mf, mff, mu) = (median(full.clone()), median(ff.clone()), median(uni));
    let pass = mf < mff && mff < mu && first >= 2 && second >= 2;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/");
    verdict(
        pass,
        format!(
            "median full {mf:.3} vs ff_noattn {mff:.3} vs min(tfe {:.3}, sfe {:.3}) {mu:.3}; per seed full {} ff {}; \
             full<ff in {first}/3, ff<unimodal in {second}/3",
            median(tfe.clone()),
            median(sfe.clone()),
            fmt(&full),
            fmt(&ff)
        ),
    )
}

fn learning_signal() -> Verdict {
    let ds = &desk().ds;
    let mut ratios = Vec::new();
    for r in free_space_runs() {
        let base = constant_baseline(ds, &r.train, &r.test).unwrap();
        ratios.push(r.entry(Variant::Full).metrics.overall.rmse / base.overall.rmse);
    }
    let m = median(ratios.clone());
    verdict(
        m < 0.1,
        format!("full / constant-mean RMSE: median {m:.4} (seeds {:.4}/{:.4}/{:.4})", ratios[0], ratios[1], ratios[2]),
    )
}

fn load_robustness() -> Verdict {
    let ds = &desk().ds;
    let mut wins = 0;
    let mut notes = Vec::new();
    for seed in SEEDS {
        let (tr, te) = select_split(ds, &LoadCondition::ALL, seed).unwrap();
        let (enc, fc) = pretrained_features(ds, &tr, &te, seed);
        let run = |variant| {
            let cfg = TrainConfig { seed, variant, ..TrainConfig::default() };
            let t = train(ds, &cfg, &tr, &te, Some(&enc), Some(&fc)).unwrap();
            evaluate(&t, ds, &te, Some(&fc)).unwrap()
        };
        let full = run(Variant::Full);
        let others = [run(Variant::TfeOnly), run(Variant::SfeOnly)];
        let mut all = true;
        let mut margins = Vec::new();
        for load in LoadCondition::ALL {
            let f = full.load(load).unwrap().rmse;
            let best = others.iter().map(|m| m.load(load).unwrap().rmse).fold(f64::INFINITY, f64::min);
            all &= f < best;
            margins.push(format!("{load}:{f:.2}<{best:.2}"));
        }
        wins += all as usize;
        notes.push(format!("seed {seed} [{}]", margins.join(" ")));
    }
    verdict(wins >= 2, format!("full beats both unimodal variants on every load in {wins}/3 seeds; {}", notes.join("; ")))
}

fn reconstruction() -> Verdict {
    let spec = DataConfig::desk().robot;
    let free = LoadCondition::None.load();
    let mut oracle_worst = 0.0f64;
    for q in envelope(&spec, 5, 5) {
        let p = marker_positions(&q, &free, &spec).unwrap();
        oracle_worst = oracle_worst.max(reconstruct(&p, &q, &free, &spec).unwrap().mean_error);
    }

    let ds = &desk().ds;
    let run = &free_space_runs()[0];
    let full = run.entry(Variant::Full);
    let pred = predict(&full.trained, ds, &run.test, Some(&run.features)).unwrap();
    let (mut oracle_sum, mut pred_sum, mut per_sample_over) = (0.0, 0.0, 0);
    for (&i, p) in run.test.iter().zip(&pred) {
        let s = &ds.samples[i];
        let load = s.load.load();
        let oracle = reconstruct(&s.points, s.current(), &load, &spec).unwrap().mean_error;
        let predicted = reconstruct(p, s.current(), &load, &spec).unwrap().mean_error;
        let sq: f64 = p.iter().zip(&s.points).flat_map(|(a, b)| (0..3).map(move |k| (a[k] - b[k]).powi(2))).sum();
        per_sample_over += (predicted > (sq / (3 * p.len()) as f64).sqrt() + oracle) as usize;
        oracle_sum += oracle;
        pred_sum += predicted;
    }
    let n = pred.len() as f64;
    let (oracle_mean, pred_mean, rmse) = (oracle_sum / n, pred_sum / n, full.metrics.overall.rmse);
    verdict(
        oracle_worst < 0.5 && pred_mean <= rmse + oracle_mean,
        format!(
            "oracle curve error ≤ {oracle_worst:.4} over 25 configurations; predicted curve error {pred_mean:.4} vs \
             RMSE {rmse:.4} + oracle {oracle_mean:.4} over {} test samples ({per_sample_over} exceed their own \
             sample's bound)",
            pred.len()
        ),
    )
}

/// Generate, pretrain, train and evaluate end to end on the tiny profile,
/// returning every artefact that is expected to be reproducible.
fn tiny_pipeline() -> Vec<(String, String)> {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    generate(&DataConfig::tiny(), 11, &data).unwrap();
    let ds = Dataset::open(&data).unwrap();
    let (tr, te) = ds.split(4).unwrap();
    let pcfg = PretrainConfig { profile: "tiny".into(), epochs: 2, seed: 4, ..PretrainConfig::default() };
    let pre = pretrain_sfe(&ds, &pcfg, &tr, &te).unwrap();
    let enc = pre.encoder();
    let mut out = vec![
        ("digest".into(), digest(&data).unwrap()),
        ("pretrain_log.csv".into(), pretrain_log_csv(&pre.log)),
    ];
    for variant in Variant::ALL {
        let cfg = TrainConfig { profile: "tiny".into(), epochs: 3, batch: 8, seed: 4, variant, ..TrainConfig::default() };
        let t = train(&ds, &cfg, &tr, &te, Some(&enc), None).unwrap();
        let m = evaluate(&t, &ds, &te, None).unwrap();
        let run = dir.path().join(variant.as_str());
        save_run(&run, &t, &cfg, &LoadCondition::ALL).unwrap();
        out.push((format!("{variant}/train_log.csv"), std::fs::read_to_string(run.join(TRAIN_LOG)).unwrap()));
        out.push((format!("{variant}/metrics.csv"), m.to_csv()));
        out.push((format!("{variant}/table1.csv"), comparison_csv(&[("p", &m)])));
        out.push((format!("{variant}/table2.csv"), load_csv(&[("p", &m)])));
    }
    out
}

fn determinism() -> Verdict {
    let (a, b) = (tiny_pipeline(), tiny_pipeline());
    let differing: Vec<&str> = a.iter().zip(&b).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0.as_str()).collect();
    verdict(
        differing.is_empty() && a.len() == b.len(),
        if differing.is_empty() {
            format!("{} artefacts byte-identical across two runs", a.len())
        } else {
            format!("differing: {}", differing.join(", "))
        },
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        (1, "gradient integrity", gradient_integrity),
        (2, "bezier oracle", bezier_oracle),
        (3, "loss identities", loss_identities),
        (4, "dataset audit", dataset_audit),
        (5, "ablation ordering", ablation_ordering),
        (6, "learning signal", learning_signal),
        (7, "load robustness", load_robustness),
        (8, "reconstruction", reconstruction),
        (9, "determinism", determinism),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            verdict(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        failed += !v.pass as usize;
        println!(
            "criterion {n} ({name}): {} — {} [{:.0}s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
