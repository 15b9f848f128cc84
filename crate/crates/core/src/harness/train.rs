use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::MetricsTable;
use crate::data::{split, Dataset};
use crate::error::{Error, Result};
use crate::net::{DropoutKey, NetConfig, Normalizer, SpatialInput, StNet, TendonWindow, Variant};
use crate::sim::{LoadCondition, Point3};
use crate::tensor::{AdamConfig, AdamState, Graph, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub variant: Variant,
    pub profile: String,
    /// Pretraining loss weights, carried for provenance of the encoder.
    pub alpha: f64,
    pub beta: f64,
    /// Train the encoder jointly instead of keeping it frozen.
    pub finetune_sfe: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 64,
            epochs: 50,
            seed: 0,
            variant: Variant::Full,
            profile: "desk".into(),
            alpha: 0.5,
            beta: 0.5,
            finetune_sfe: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        NetConfig::by_name(&self.profile)?;
        Ok(())
    }
}

/// Encoder outputs keyed by global sample index.
#[derive(Clone, Debug, Default)]
pub struct FeatureCache {
    features: Vec<Option<Tensor>>,
}

impl FeatureCache {
    pub fn get(&self, index: usize) -> Result<&Tensor> {
        self.features
            .get(index)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::Contract(format!("no cached features for sample {index}")))
    }

    pub fn len(&self) -> usize {
        self.features.iter().flatten().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Check that `encoder` holds exactly the encoder weights of `net`'s profile.
pub fn check_encoder(net: &StNet, encoder: &ParamStore) -> Result<()> {
    let mut expected = ParamStore::new();
    net.init_encoder(&mut expected, &mut ChaCha8Rng::seed_from_u64(0))?;
    for (name, t) in expected.iter() {
        let got = encoder
            .get(name)
            .map_err(|_| Error::Config(format!("encoder checkpoint lacks {name} for profile {}", net.config.profile)))?;
        if got.shape() != t.shape() {
            return Err(Error::Config(format!(
                "encoder weight {name} has shape {:?}, profile {} expects {:?}",
                got.shape(),
                net.config.profile,
                t.shape()
            )));
        }
    }
    Ok(())
}

/// Run the frozen encoder over every listed sample.
pub fn encode_features(ds: &Dataset, net_cfg: &NetConfig, encoder: &ParamStore, indices: &[usize]) -> Result<FeatureCache> {
    let net = StNet::new(net_cfg.clone(), Variant::SfeOnly)?;
    check_encoder(&net, encoder)?;
    let mut features = vec![None; ds.len()];
    for &i in indices {
        let s = ds.samples.get(i).ok_or_else(|| Error::Contract(format!("sample {i} out of range")))?;
        let img = s.load_image()?;
        let f = net.encode_image(encoder, &img).map_err(|e| Error::Sample {
            index: i,
            source: Box::new(e),
        })?;
        features[i] = Some(f);
    }
    Ok(FeatureCache { features })
}

/// Indices of the samples recorded under any of `loads`, split with `seed`.
pub fn select_split(ds: &Dataset, loads: &[LoadCondition], seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let selected: Vec<usize> = ds.samples.iter().filter(|s| loads.contains(&s.load)).map(|s| s.index).collect();
    let (a, b) = split(selected.len(), ds.config().split_ratio, seed)?;
    Ok((a.into_iter().map(|i| selected[i]).collect(), b.into_iter().map(|i| selected[i]).collect()))
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count().max(1) as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    (mean, if sd > 1e-12 { sd } else { 1.0 })
}

/// Standardisation statistics from the training samples only.
pub fn fit_normalizer(ds: &Dataset, net: &StNet, train: &[usize], features: Option<&FeatureCache>) -> Result<Normalizer> {
    if train.is_empty() {
        return Err(Error::Contract("cannot fit statistics on an empty training set".into()));
    }
    let cfg = &net.config;
    let mut norm = Normalizer::identity(cfg);
    let qmax = train
        .iter()
        .flat_map(|&i| ds.samples[i].window.iter().flatten())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    norm.tendon_scale = if qmax > 0.0 { 1.0 / qmax } else { 1.0 };
    for o in 0..cfg.outputs() {
        let (m, s) = mean_std(train.iter().map(|&i| ds.samples[i].points[o / 3][o % 3]));
        norm.target_mean[o] = m;
        norm.target_std[o] = s;
    }
    if let (true, Some(fc)) = (net.variant.uses_image(), features) {
        let c = cfg.bottleneck_shape()[2];
        let feats = train.iter().map(|&i| fc.get(i)).collect::<Result<Vec<_>>>()?;
        for ch in 0..c {
            let (m, s) = mean_std(feats.iter().flat_map(|f| f.data().iter().skip(ch).step_by(c).copied()));
            norm.feature_mean[ch] = m;
            norm.feature_std[ch] = s;
        }
    }
    Ok(norm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_rmse: f64,
}

pub fn train_log_csv(log: &[TrainEpoch]) -> String {
    let mut s = String::from("epoch,train_loss,val_rmse\n");
    for e in log {
        s.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.val_rmse));
    }
    s
}

/// A trained network with everything needed to run it.
#[derive(Clone, Debug)]
pub struct Trained {
    pub net: StNet,
    /// All weights, including the encoder for image variants.
    pub params: ParamStore,
    pub norm: Normalizer,
    pub log: Vec<TrainEpoch>,
}

/// Where spatial inputs come from during training and inference.
enum Spatial<'a> {
    None,
    Cached(&'a FeatureCache),
    Images(Vec<Option<Tensor>>),
}

impl Spatial<'_> {
    fn input(&self, index: usize) -> Result<SpatialInput<'_>> {
        match self {
            Spatial::None => Ok(SpatialInput::Features(&DUMMY)),
            Spatial::Cached(fc) => Ok(SpatialInput::Features(fc.get(index)?)),
            Spatial::Images(imgs) => imgs[index]
                .as_ref()
                .map(SpatialInput::Image)
                .ok_or_else(|| Error::Contract(format!("image {index} not loaded"))),
        }
    }
}

// Placeholder for variants that never read the spatial input.
static DUMMY: std::sync::LazyLock<Tensor> = std::sync::LazyLock::new(|| Tensor::zeros(&[1]));

fn load_images(ds: &Dataset, indices: &[usize]) -> Result<Vec<Option<Tensor>>> {
    let mut out = vec![None; ds.len()];
    for &i in indices {
        out[i] = Some(ds.samples[i].load_image()?);
    }
    Ok(out)
}

fn windows(ds: &Dataset) -> Result<Vec<TendonWindow>> {
    ds.samples.iter().map(|s| TendonWindow::new(s.window.clone())).collect()
}

fn points_tensor(p: &[Point3]) -> Tensor {
    Tensor::new(vec![p.len(), 3], p.iter().flatten().copied().collect()).expect("n×3")
}

/// Train one variant with Adam on `L_ST`, the mean squared point error.
///
/// Image variants need `encoder`. Unless `finetune_sfe` is set the encoder
/// stays frozen and its outputs come from `features` (computed here when
/// absent).
pub fn train(
    ds: &Dataset,
    cfg: &TrainConfig,
    train_idx: &[usize],
    val_idx: &[usize],
    encoder: Option<&ParamStore>,
    features: Option<&FeatureCache>,
) -> Result<Trained> {
    cfg.validate()?;
    if train_idx.is_empty() {
        return Err(Error::Contract("empty training split".into()));
    }
    let net_cfg = NetConfig::by_name(&cfg.profile)?;
    if net_cfg.points != ds.config().robot.marker_count() {
        return Err(Error::Config(format!(
            "profile {} predicts {} points, dataset has {} markers",
            cfg.profile,
            net_cfg.points,
            ds.config().robot.marker_count()
        )));
    }
    let net = StNet::new(net_cfg.clone(), cfg.variant)?;
    let mut params = net.init_params(cfg.seed)?;

    let owned;
    let spatial = if !cfg.variant.uses_image() {
        Spatial::None
    } else {
        let enc = encoder.ok_or_else(|| Error::Config(format!("variant {} needs a pretrained encoder", cfg.variant)))?;
        check_encoder(&net, enc)?;
        params.overwrite_from(enc)?;
        if cfg.finetune_sfe {
            let all: Vec<usize> = train_idx.iter().chain(val_idx).copied().collect();
            Spatial::Images(load_images(ds, &all)?)
        } else if let Some(fc) = features {
            Spatial::Cached(fc)
        } else {
            let all: Vec<usize> = train_idx.iter().chain(val_idx).copied().collect();
            owned = encode_features(ds, &net_cfg, enc, &all)?;
            Spatial::Cached(&owned)
        }
    };
    let norm = match &spatial {
        Spatial::Cached(fc) => fit_normalizer(ds, &net, train_idx, Some(fc))?,
        Spatial::Images(_) => {
            let enc = params.subset("sfe.");
            let fc = encode_features(ds, &net_cfg, &enc, train_idx)?;
            fit_normalizer(ds, &net, train_idx, Some(&fc))?
        }
        Spatial::None => fit_normalizer(ds, &net, train_idx, None)?,
    };

    // Frozen encoder weights sit outside the optimised store.
    let frozen = if cfg.variant.uses_image() && !cfg.finetune_sfe {
        let enc = params.subset("sfe.");
        let mut rest = ParamStore::new();
        for (k, v) in params.iter().filter(|(k, _)| !k.starts_with("sfe.")) {
            rest.insert(k, v.clone())?;
        }
        params = rest;
        Some(enc)
    } else {
        None
    };

    let win = windows(ds)?;
    let targets: Vec<Tensor> = ds.samples.iter().map(|s| points_tensor(&s.points)).collect();
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut opt = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = train_idx.to_vec();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut call = 0u64;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch) {
            params.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let mut g = Graph::new();
                let key = DropoutKey {
                    train: true,
                    seed: cfg.seed,
                    call,
                };
                call += 1;
                let out = net.forward(&mut g, &params, &norm, &win[i], spatial.input(i)?, key)?;
                let t = g.input(targets[i].clone());
                let loss = g.mse(out.points, t)?;
                total += g.value(loss).data()[0];
                g.backward(loss, &mut params, scale)?;
            }
            opt.step(&mut params, &adam)?;
        }
        let train_loss = total / order.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        let val_rmse = if val_idx.is_empty() {
            f64::NAN
        } else {
            let preds = predict_with(&net, &params, &norm, &win, &spatial, val_idx)?;
            rmse(&preds, val_idx.iter().map(|&i| &ds.samples[i].points))
        };
        log.push(TrainEpoch {
            epoch,
            train_loss,
            val_rmse,
        });
    }
    if let Some(enc) = frozen {
        for (k, v) in enc.iter() {
            params.insert(k, v.clone())?;
        }
    }
    Ok(Trained { net, params, norm, log })
}

fn predict_with(
    net: &StNet,
    params: &ParamStore,
    norm: &Normalizer,
    win: &[TendonWindow],
    spatial: &Spatial<'_>,
    indices: &[usize],
) -> Result<Vec<Vec<Point3>>> {
    indices
        .iter()
        .map(|&i| {
            let p = net.predict(params, norm, &win[i], spatial.input(i)?)?;
            Ok(p.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
        })
        .collect()
}

fn rmse<'a>(pred: &[Vec<Point3>], truth: impl Iterator<Item = &'a Vec<Point3>>) -> f64 {
    let (mut sq, mut n) = (0.0, 0usize);
    for (p, t) in pred.iter().zip(truth) {
        for (a, b) in p.iter().flatten().zip(t.iter().flatten()) {
            sq += (a - b).powi(2);
            n += 1;
        }
    }
    (sq / n as f64).sqrt()
}

/// Evaluation-mode predictions for `indices`.
pub fn predict(trained: &Trained, ds: &Dataset, indices: &[usize], features: Option<&FeatureCache>) -> Result<Vec<Vec<Point3>>> {
    let owned;
    let spatial = if !trained.net.variant.uses_image() {
        Spatial::None
    } else if let Some(fc) = features {
        Spatial::Cached(fc)
    } else {
        owned = encode_features(ds, &trained.net.config, &trained.params.subset("sfe."), indices)?;
        Spatial::Cached(&owned)
    };
    let win = windows(ds)?;
    predict_with(&trained.net, &trained.params, &trained.norm, &win, &spatial, indices)
}

/// Metrics of `trained` over `indices`. Leaves the model untouched.
pub fn evaluate(trained: &Trained, ds: &Dataset, indices: &[usize], features: Option<&FeatureCache>) -> Result<MetricsTable> {
    if indices.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty split".into()));
    }
    let pred = predict(trained, ds, indices, features)?;
    score(ds, indices, &pred)
}

pub fn score(ds: &Dataset, indices: &[usize], pred: &[Vec<Point3>]) -> Result<MetricsTable> {
    let truth: Vec<Vec<Point3>> = indices.iter().map(|&i| ds.samples[i].points.clone()).collect();
    let loads: Vec<LoadCondition> = indices.iter().map(|&i| ds.samples[i].load).collect();
    MetricsTable::compute(pred, &truth, &loads)
}

/// Predict the training-set mean cloud for every test sample.
pub fn constant_baseline(ds: &Dataset, train_idx: &[usize], test_idx: &[usize]) -> Result<MetricsTable> {
    if train_idx.is_empty() {
        return Err(Error::Contract("empty training split".into()));
    }
    let n = ds.config().robot.marker_count();
    let mut mean = vec![[0.0; 3]; n];
    for &i in train_idx {
        for (m, p) in mean.iter_mut().zip(&ds.samples[i].points) {
            for a in 0..3 {
                m[a] += p[a];
            }
        }
    }
    for m in &mut mean {
        for v in m.iter_mut() {
            *v /= train_idx.len() as f64;
        }
    }
    let pred = vec![mean; test_idx.len()];
    score(ds, test_idx, &pred)
}
