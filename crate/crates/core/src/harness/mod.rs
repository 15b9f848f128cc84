//! Pretraining, training, ablation, evaluation and reconstruction, plus the
//! on-disk layout of trained runs.

mod metrics;
mod pretrain;
mod reconstruct;
mod train;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use metrics::{comparison_csv, comparison_table, first_reported_marker, load_csv, load_table, ErrorStat, MetricsTable};
pub use pretrain::{pretrain_log_csv, pretrain_sfe, reconstruction_loss, Phase, PretrainConfig, PretrainEpoch, Pretrained};
pub use reconstruct::{envelope, reconstruct, Reconstruction, DENSE_SAMPLES};
pub use train::{
    check_encoder, constant_baseline, encode_features, evaluate, fit_normalizer, predict, score, select_split, train,
    train_log_csv, FeatureCache, TrainConfig, TrainEpoch, Trained,
};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::{NetConfig, Normalizer, Perceptual, StNet, Variant};
use crate::sim::LoadCondition;
use crate::tensor::{load_checkpoint, save_checkpoint, ParamStore};

pub const RUN_FILE: &str = "run.json";
pub const MODEL_FILE: &str = "model.json";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const ENCODER_FILE: &str = "sfe.json";
pub const DECODER_FILE: &str = "decoder.json";
pub const PERCEPTUAL_FILE: &str = "perceptual.json";
pub const PRETRAIN_LOG: &str = "pretrain_log.csv";

/// Everything except the weights needed to rebuild a trained run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub net: NetConfig,
    pub variant: Variant,
    pub normalizer: Normalizer,
    pub train: TrainConfig,
    /// Load conditions the split was drawn from.
    pub loads: Vec<LoadCondition>,
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn save_run(dir: &Path, trained: &Trained, cfg: &TrainConfig, loads: &[LoadCondition]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let info = RunInfo {
        net: trained.net.config.clone(),
        variant: trained.net.variant,
        normalizer: trained.norm.clone(),
        train: cfg.clone(),
        loads: loads.to_vec(),
    };
    write(&dir.join(RUN_FILE), &(serde_json::to_string_pretty(&info)? + "\n"))?;
    save_checkpoint(&trained.params, &dir.join(MODEL_FILE))?;
    write(&dir.join(TRAIN_LOG), &train_log_csv(&trained.log))
}

pub fn load_run(dir: &Path) -> Result<(Trained, RunInfo)> {
    let path = dir.join(RUN_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let info: RunInfo = serde_json::from_str(&text)?;
    let net = StNet::new(info.net.clone(), info.variant)?;
    let params = load_checkpoint(&dir.join(MODEL_FILE))?;
    let expected = net.init_params(0)?;
    for (name, t) in expected.iter() {
        let got = params.get(name).map_err(|_| Error::Config(format!("checkpoint lacks {name}")))?;
        if got.shape() != t.shape() {
            return Err(Error::Config(format!("checkpoint weight {name} has shape {:?}, expected {:?}", got.shape(), t.shape())));
        }
    }
    Ok((
        Trained {
            net,
            params,
            norm: info.normalizer.clone(),
            log: Vec::new(),
        },
        info,
    ))
}

pub fn save_pretrained(dir: &Path, p: &Pretrained, cfg: &PretrainConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_checkpoint(&p.encoder(), &dir.join(ENCODER_FILE))?;
    save_checkpoint(&p.decoder(), &dir.join(DECODER_FILE))?;
    save_checkpoint(p.perceptual.weights(), &dir.join(PERCEPTUAL_FILE))?;
    write(&dir.join("pretrain_config.json"), &(serde_json::to_string_pretty(cfg)? + "\n"))?;
    write(&dir.join(PRETRAIN_LOG), &pretrain_log_csv(&p.log))
}

/// Reload encoder, decoder and the frozen perceptual extractor.
pub fn load_pretrained(dir: &Path) -> Result<(ParamStore, Perceptual)> {
    let mut ae = load_checkpoint(&dir.join(ENCODER_FILE))?;
    for (k, v) in load_checkpoint(&dir.join(DECODER_FILE))?.iter() {
        ae.insert(k, v.clone())?;
    }
    let phi_weights = load_checkpoint(&dir.join(PERCEPTUAL_FILE))?;
    let blocks = (0..).take_while(|i| phi_weights.contains(&format!("sfe.b{i}.conv1.k"))).count();
    Ok((ae, Perceptual::snapshot(&phi_weights, blocks)?))
}

/// Encoder weights alone, from a pretraining directory or a checkpoint file.
pub fn load_encoder(path: &Path) -> Result<ParamStore> {
    let file = if path.is_dir() { path.join(ENCODER_FILE) } else { path.to_path_buf() };
    Ok(load_checkpoint(&file)?.subset("sfe."))
}

/// Result of training and scoring one variant in an ablation.
#[derive(Clone, Debug)]
pub struct AblationEntry {
    pub variant: Variant,
    pub trained: Trained,
    pub metrics: MetricsTable,
}

/// Train and test every variant on one shared split and seed.
pub fn ablate(
    ds: &Dataset,
    base: &TrainConfig,
    loads: &[LoadCondition],
    encoder: &ParamStore,
    features: Option<&FeatureCache>,
) -> Result<Vec<AblationEntry>> {
    let (tr, te) = select_split(ds, loads, base.seed)?;
    let owned;
    let features = match features {
        Some(f) => f,
        None => {
            let all: Vec<usize> = tr.iter().chain(&te).copied().collect();
            owned = encode_features(ds, &NetConfig::by_name(&base.profile)?, encoder, &all)?;
            &owned
        }
    };
    Variant::ALL
        .iter()
        .map(|&variant| {
            let cfg = TrainConfig { variant, ..base.clone() };
            let trained = train(ds, &cfg, &tr, &te, Some(encoder), Some(features))?;
            let metrics = evaluate(&trained, ds, &te, Some(features))?;
            Ok(AblationEntry {
                variant,
                trained,
                metrics,
            })
        })
        .collect()
}
