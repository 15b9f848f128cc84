use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::{sfe_composite_loss, NetConfig, Perceptual, SsimConstants, StNet, Variant};
use crate::tensor::{AdamConfig, AdamState, Graph, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub profile: String,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub alpha: f64,
    pub beta: f64,
    /// Reconstruction-only epochs (MSE + SSIM) run before the perceptual
    /// feature extractor is snapshotted. Not counted in `epochs`.
    pub warmup_epochs: usize,
    /// Cap on training images; 0 uses all of them.
    pub max_images: usize,
    /// Held-out images for the validation loss.
    pub val_images: usize,
    pub ssim: SsimConstants,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            profile: "desk".into(),
            lr: 1e-3,
            batch: 8,
            epochs: 5,
            seed: 0,
            alpha: 0.5,
            beta: 0.5,
            warmup_epochs: 1,
            max_images: 256,
            val_images: 32,
            ssim: SsimConstants::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch == 0 {
            return Err(Error::Config("pretraining needs lr > 0 and batch ≥ 1".into()));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        NetConfig::by_name(&self.profile)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Composite,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub phase: Phase,
    pub loss: f64,
    pub val_loss: f64,
}

pub fn pretrain_log_csv(log: &[PretrainEpoch]) -> String {
    let mut s = String::from("epoch,phase,loss,val_loss\n");
    for e in log {
        let phase = match e.phase {
            Phase::Warmup => "warmup",
            Phase::Composite => "composite",
        };
        s.push_str(&format!("{},{phase},{},{}\n", e.epoch, e.loss, e.val_loss));
    }
    s
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    /// Encoder and decoder weights.
    pub autoencoder: ParamStore,
    pub perceptual: Perceptual,
    pub log: Vec<PretrainEpoch>,
}

impl Pretrained {
    pub fn encoder(&self) -> ParamStore {
        self.autoencoder.subset("sfe.")
    }

    pub fn decoder(&self) -> ParamStore {
        self.autoencoder.subset("dec.")
    }
}

/// Mean composite loss over `images`; `phi = None` drops the perceptual term.
pub fn reconstruction_loss(
    net: &StNet,
    autoencoder: &ParamStore,
    phi: Option<&Perceptual>,
    images: &[Tensor],
    cfg: &PretrainConfig,
) -> Result<f64> {
    if images.is_empty() {
        return Ok(f64::NAN);
    }
    let alpha = if phi.is_some() { cfg.alpha } else { 0.0 };
    let mut total = 0.0;
    for img in images {
        let mut g = Graph::new();
        let x = g.input(img.clone());
        let f = net.sfe_encode(&mut g, autoencoder, x)?;
        let y = net.sfe_decode(&mut g, autoencoder, f)?;
        let l = sfe_composite_loss(&mut g, y, x, phi, alpha, cfg.beta, cfg.ssim)?;
        total += g.value(l).data()[0];
    }
    Ok(total / images.len() as f64)
}

/// Unsupervised encoder pretraining by image reconstruction.
///
/// Training images are drawn from `train_idx`, validation images from
/// `val_idx`, each subsampled with the configured seed.
pub fn pretrain_sfe(ds: &Dataset, cfg: &PretrainConfig, train_idx: &[usize], val_idx: &[usize]) -> Result<Pretrained> {
    cfg.validate()?;
    let net = StNet::new(NetConfig::by_name(&cfg.profile)?, Variant::SfeOnly)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pick = |idx: &[usize], cap: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        let mut v = idx.to_vec();
        v.shuffle(rng);
        if cap > 0 {
            v.truncate(cap);
        }
        v
    };
    let train_pick = pick(train_idx, cfg.max_images, &mut rng);
    if train_pick.is_empty() {
        return Err(Error::Contract("no images to pretrain on".into()));
    }
    let val_pick = pick(val_idx, cfg.val_images, &mut rng);
    let load = |idx: &[usize]| idx.iter().map(|&i| ds.samples[i].load_image()).collect::<Result<Vec<_>>>();
    let images = load(&train_pick)?;
    let val = load(&val_pick)?;

    let mut ae = net.init_autoencoder(cfg.seed)?;
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut opt = AdamState::new(&ae);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut phi: Option<Perceptual> = None;
    let mut log = Vec::new();
    for epoch in 1..=cfg.warmup_epochs + cfg.epochs {
        let phase = if epoch <= cfg.warmup_epochs {
            Phase::Warmup
        } else {
            if phi.is_none() {
                phi = Some(Perceptual::snapshot(&ae, net.config.ladder.len())?);
            }
            Phase::Composite
        };
        let alpha = if phi.is_some() { cfg.alpha } else { 0.0 };
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch) {
            ae.zero_grads();
            for &i in batch {
                let mut g = Graph::new();
                let x = g.input(images[i].clone());
                let f = net.sfe_encode(&mut g, &ae, x)?;
                let y = net.sfe_decode(&mut g, &ae, f)?;
                let l = sfe_composite_loss(&mut g, y, x, phi.as_ref(), alpha, cfg.beta, cfg.ssim)?;
                total += g.value(l).data()[0];
                g.backward(l, &mut ae, 1.0 / batch.len() as f64)?;
            }
            opt.step(&mut ae, &adam)?;
        }
        let loss = total / images.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        let val_loss = reconstruction_loss(&net, &ae, phi.as_ref(), &val, cfg)?;
        log.push(PretrainEpoch {
            epoch,
            phase,
            loss,
            val_loss,
        });
    }
    let perceptual = match phi {
        Some(p) => p,
        None => Perceptual::snapshot(&ae, net.config.ladder.len())?,
    };
    Ok(Pretrained {
        autoencoder: ae,
        perceptual,
        log,
    })
}
