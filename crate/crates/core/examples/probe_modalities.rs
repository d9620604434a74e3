//! What each modality subset reveals about each label head, measured with
//! linear probes on pooled raw streams.

use mmdistill::modality::ModalitySet;
use mmdistill::probe::{linear_probe, ProbeConfig};
use mmdistill::synthdata::{generate_dataset, DatasetSpec};

fn main() -> mmdistill::Result<()> {
    let spec = DatasetSpec::default();
    let splits = generate_dataset(&spec)?;
    let names = spec.modality_names();
    let cfg = ProbeConfig::default();
    for subset in ModalitySet::all_nonempty(spec.num_modalities()) {
        let ms: Vec<usize> = subset.iter().collect();
        let accs = (0..spec.heads.len())
            .map(|h| linear_probe(&splits.train, &splits.test, &ms, h, &cfg))
            .collect::<mmdistill::Result<Vec<_>>>()?;
        let cells: Vec<String> = spec
            .heads
            .iter()
            .zip(&accs)
            .map(|(h, a)| format!("{} {:.3} (chance {:.3})", h.name, a, 1.0 / h.classes as f64))
            .collect();
        println!("{:<6} {}", subset.label(&names), cells.join("  "));
    }
    Ok(())
}
