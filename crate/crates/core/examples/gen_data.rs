//! Generate the synthetic multimodal splits, print their statistics and
//! write them to disk.
//!
//! cargo run --release --example gen_data -- [out_dir]

use mmdistill::synthdata::{
    dataset_stats, generate_dataset, read_splits, write_splits, DatasetSpec,
};

fn main() -> mmdistill::Result<()> {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "runs/example-data".into());
    let spec = DatasetSpec::default();
    let splits = generate_dataset(&spec)?;
    for data in [&splits.train, &splits.val, &splits.test] {
        let stats = dataset_stats(data)?;
        println!(
            "{:<5} {} samples, availability {:?}",
            data.split.name(),
            stats.samples,
            stats.availability_rate
        );
        for (head, hist) in spec.heads.iter().zip(&stats.class_histogram) {
            println!("      {:<5} {:?}", head.name, hist);
        }
    }
    let first = &splits.train.samples[0];
    for (m, name) in spec.modality_names().iter().enumerate() {
        match first.stream(m) {
            Some(t) => println!("sample 0 {name}: {:?}", t.shape()),
            None => println!("sample 0 {name}: missing"),
        }
    }
    let dir = std::path::Path::new(&out);
    write_splits(dir, &splits)?;
    assert_eq!(read_splits(dir)?, splits);
    println!("wrote {}", dir.display());
    Ok(())
}
