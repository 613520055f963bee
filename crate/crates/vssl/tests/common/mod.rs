#![allow(dead_code)]

use vssl::config::ExperimentConfig;

/// A configuration small enough for every command to finish in seconds.
pub const TINY: &str = r#"
seed = 3
n_runs = 2
model = "desk"
compare = ["none:frozen", "mfcc"]
alpha_grid = [0.5, 0.9]
snr_list = [-5.0, 20.0]
fraction_list = [0.5, 1.0]

[data.synthetic]
n_speakers = 6
clips_per_class = 2
clip_seconds = 0.5

[pretrain]
lr0 = 0.001
epochs = 2
batch_size = 8

[downstream]
hidden = 8
layers = 1
lr0 = 0.003
epochs = 3
batch_size = 8
"#;

pub fn tiny() -> ExperimentConfig {
    ExperimentConfig::from_toml(TINY).unwrap()
}
