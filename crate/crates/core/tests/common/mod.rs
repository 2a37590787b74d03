#![allow(dead_code)]

pub mod density;
pub mod oracles;

use std::path::Path;

use tunechat::pipeline::PipelineConfig;

/// A pipeline small enough to run end to end in seconds.
pub fn small_config(out: &Path) -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.out_dir = out.to_path_buf();
    c.world.n_songs = 150;
    c.world.n_off_platform = 15;
    c.world.n_artists = 15;
    c.world.n_users = 40;
    c.world.sessions_per_user = 3;
    c.uq2i.n_clusters = 12;
    c.uq2i.n_sft = 80;
    c.uq2i.n_rl = 8;
    c.uq2i.n_eval = 12;
    c.pretrain.plan.stage_epochs = [1, 1, 1];
    c.sft.epochs = 1;
    c.rl.group_size = 4;
    c.rl.n_prompts_per_step = 4;
    c.eval.n_probes = 40;
    c
}
