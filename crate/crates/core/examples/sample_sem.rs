//! Draws ID and OOD samples from the benchmark task and writes them as CSV.
//!
//! cargo run --example sample_sem -- [n] [out_dir]

use std::fs::File;
use std::path::PathBuf;

use misspec::sem::{sample_dataset, EnvId, Environment, TaskSpec};

fn main() -> misspec::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(1000);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "out/examples".into()));
    std::fs::create_dir_all(&out)?;

    let task = TaskSpec::benchmark();
    for env in [
        Environment::uniform(EnvId::Id, task.d_spu, 0.1),
        Environment::uniform(EnvId::Ood, task.d_spu, 3.0),
    ] {
        let data = sample_dataset(&task, &env, n, 7)?;
        let positive = data.label.iter().filter(|&&l| l > 0).count();
        let path = out.join(format!("sample_{}.csv", env.env_id));
        data.write_csv(File::create(&path)?)?;
        println!(
            "{}: {} rows x {} columns, {:.1}% positive -> {}",
            env.env_id,
            data.len(),
            data.width(),
            100.0 * positive as f64 / n as f64,
            path.display()
        );
    }
    Ok(())
}
