//! Accuracy of every modality subset and under inference-time modality
//! dropout, for the plain baseline and the distilled student. Writes the
//! reports and an SVG of the sweep to `runs/example-sweep/`.

use mmdistill::config::{Ladder, RunConfig};
use mmdistill::pipeline::{evaluate_model, pretrain_encoders, run_ladder, run_teacher};
use mmdistill::synthdata::generate_dataset;

fn main() -> mmdistill::Result<()> {
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let cfg = RunConfig::default().with_overrides(&overrides)?;
    let out = std::path::Path::new("runs/example-sweep");
    let splits = generate_dataset(&cfg.dataset_spec())?;
    let bank = pretrain_encoders(&cfg, &splits)?;
    let (teacher, _) = run_teacher(&cfg, &splits, &bank)?;
    let (plain, _) = run_ladder(&cfg, &splits, &bank, None, Ladder::PLAIN)?;
    let (student, _) = run_ladder(&cfg, &splits, &bank, Some(&teacher), Ladder::FULL)?;

    let mut report = evaluate_model(&cfg, &plain, &splits, "baseline")?;
    let other = evaluate_model(&cfg, &student, &splits, "student")?;
    report.rows.extend(other.rows);
    report.resources.extend(other.resources);

    let names = cfg.data.modality_names();
    println!("{:<8} {:>9} {:>9}", "subset", "baseline", "student");
    for s in mmdistill::modality::ModalitySet::all_nonempty(names.len()) {
        let b = report
            .find_subset("baseline", s)
            .map_or(f64::NAN, |r| r.action_acc);
        let t = report
            .find_subset("student", s)
            .map_or(f64::NAN, |r| r.action_acc);
        println!("{:<8} {b:>9.3} {t:>9.3}", s.label(&names));
    }
    println!("{:<8} {:>9} {:>9}", "p", "baseline", "student");
    for &p in &cfg.eval.sweep_probabilities {
        let b = report
            .find_sweep("baseline", p)
            .map_or(f64::NAN, |r| r.action_acc);
        let t = report
            .find_sweep("student", p)
            .map_or(f64::NAN, |r| r.action_acc);
        println!("{p:<8} {b:>9.3} {t:>9.3}");
    }
    std::fs::create_dir_all(out)?;
    report.write_csv(&out.join("sweep.csv"))?;
    report.write_json(&out.join("sweep.json"))?;
    report.write_sweep_svg(&out.join("sweep.svg"))?;
    println!("wrote {}", out.display());
    Ok(())
}
