#![allow(dead_code)]

use effecg::blocks::StageConfig;
use effecg::data::{prepare, synth_dataset, Prepared, SynthDatasetConfig};
use effecg::model::{FusionConfig, Head, ModelConfig};
use effecg::signal::PreprocessConfig;
use effecg::train::{EarlyStopConfig, LossConfig, LossKind, ScheduleConfig, TrainConfig};

/// Samples per record in the synthetic sets (4 s at 125 Hz).
pub const LENGTH: usize = 500;

pub fn tiny_config(fusion: bool) -> ModelConfig {
    ModelConfig {
        input_length: LENGTH,
        class_count: if fusion { 3 } else { 2 },
        head: if fusion { Head::Sigmoid } else { Head::Softmax },
        stem_channels: 8,
        stem_stride: 2,
        stages: vec![
            StageConfig {
                expansion: 1,
                out_channels: 8,
                kernel: 3,
                stride: 2,
                repeats: 1,
                se_ratio: 4,
            },
            StageConfig {
                expansion: 2,
                out_channels: 12,
                kernel: 5,
                stride: 2,
                repeats: 1,
                se_ratio: 4,
            },
        ],
        fc_hidden: 16,
        ae_hidden: 4,
        dropout_rate: 0.0,
        fusion: FusionConfig {
            enabled: fusion,
            embed_dim: 4,
            tokens: 4,
            token_width: 4,
            ..FusionConfig::default()
        },
        ..ModelConfig::default()
    }
}

pub fn tiny_train_config(fusion: bool) -> TrainConfig {
    TrainConfig {
        epochs: 100,
        batch_size: 8,
        loss: LossConfig {
            kind: if fusion { LossKind::Bce } else { LossKind::CrossEntropy },
            ..LossConfig::default()
        },
        schedule: ScheduleConfig {
            d_model: Some(256),
            warmup_steps: 100,
        },
        early_stopping: None,
        ..TrainConfig::default()
    }
}

pub fn synthetic(count: usize, fusion: bool, seed: u64) -> Prepared {
    let (d, _) = synth_dataset(&SynthDatasetConfig {
        count,
        class_count: if fusion { 3 } else { 2 },
        multi_label: fusion,
        seed,
        ..SynthDatasetConfig::default()
    })
    .unwrap();
    prepare(&d, &PreprocessConfig::default(), LENGTH).unwrap()
}

pub fn early_stop(patience: usize) -> Option<EarlyStopConfig> {
    Some(EarlyStopConfig {
        patience,
        ..EarlyStopConfig::default()
    })
}
