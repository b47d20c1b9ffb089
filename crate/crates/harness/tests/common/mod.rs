#![allow(dead_code)]

use coperc_harness::Config;

/// Small enough to train a few steps in seconds.
pub fn tiny() -> Config {
    let mut c = Config::desk();
    c.grid.h = 16;
    c.grid.w = 16;
    c.grid.resolution = 3.125;
    c.model.channels = 8;
    c.model.heads = 2;
    c.model.window = 2;
    c.model.iterations = 1;
    c.training.batch_size = 2;
    c.training.epochs_stage1 = 2;
    c.training.epochs_stage2 = 1;
    c.dataset.train_scenes = 4;
    c.dataset.val_scenes = 2;
    c.dataset.test_scenes = 4;
    c.dataset.n_vehicles = 10;
    c
}
