//! Adds the benchmark's spurious features one at a time and writes the ID and
//! OOD risk curves as CSV and SVG.

use std::fs::File;
use std::path::Path;

use misspec::plot::risk_curves_svg;
use misspec::sem::{EnvId, Environment, TaskSpec};
use misspec::theorem::{spurious_sweep, write_sweep_csv};

fn main() -> misspec::Result<()> {
    let task = TaskSpec::benchmark();
    let id = Environment::uniform(EnvId::Id, task.d_spu, 0.1);
    let ood = Environment::uniform(EnvId::Ood, task.d_spu, 3.0);
    let order: Vec<usize> = (0..task.d_spu).map(|i| task.spurious_column(i)).collect();
    let steps = spurious_sweep(&task, &id, &ood, &order)?;
    for s in &steps {
        println!("d_hat={} L_ID={:.5} L_OOD={:.5}", s.d_hat, s.l_id, s.l_ood);
    }
    let out = Path::new("out/examples");
    std::fs::create_dir_all(out)?;
    write_sweep_csv(&steps, File::create(out.join("sweep.csv"))?)?;
    std::fs::write(out.join("sweep.svg"), risk_curves_svg(&steps))?;
    Ok(())
}
