//! Runs every pipeline stage on the smoke configuration into a temporary
//! directory, then runs again to show that finished stages are skipped.
//! This is the same code path as `dlalign full-pipeline --config configs/smoke.toml`.

use dlalign::cli::{Pipeline, RunConfig};

fn main() -> dlalign::Result<()> {
    let mut cfg = RunConfig::smoke();
    let out = std::env::temp_dir().join("dlalign_smoke");
    cfg.io.output_dir = out.clone();
    Pipeline::open(cfg.clone(), false)?.full()?;
    Pipeline::open(cfg, false)?.full()?;
    for name in ["eval/open_loop_summary.txt", "eval/closed_loop_overall.csv"] {
        let path = out.join(name);
        if let Ok(text) = std::fs::read_to_string(&path) {
            println!("== {}\n{text}", path.display());
        }
    }
    Ok(())
}
