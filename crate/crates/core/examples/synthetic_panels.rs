//! Writes one-factor synthetic panels shaped like the industry and
//! size/book-to-market datasets (510 months from July 1973) as CSV files.
//!
//! cargo run --release -p precis-core --example synthetic_panels -- DIR

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use precis::simulate::FactorModel;

const SHAPES: [(&str, usize); 5] = [("17Ind", 17), ("30Ind", 30), ("49Ind", 49), ("100FF", 100), ("132S", 132)];

fn main() -> std::io::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "synthetic".into()));
    std::fs::create_dir_all(&dir)?;
    for (k, (name, p)) in SHAPES.iter().enumerate() {
        let panel = FactorModel::industry_like(*p, 100 + k as u64).panel(510, 200 + k as u64);
        let path = dir.join(format!("{name}.csv"));
        let mut out = BufWriter::new(File::create(&path)?);
        write!(out, "Date")?;
        for a in &panel.assets {
            write!(out, ",{a}")?;
        }
        writeln!(out)?;
        for (t, d) in panel.dates.iter().enumerate() {
            write!(out, "{}", d.to_yyyymm())?;
            for j in 0..panel.n_assets() {
                write!(out, ",{:.2}", panel.returns[(t, j)])?;
            }
            writeln!(out)?;
        }
        println!("{}", path.display());
    }
    Ok(())
}
