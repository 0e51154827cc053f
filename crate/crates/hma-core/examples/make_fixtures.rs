//! Regenerate the six-cohort CSV fixtures. Usage:
//!
//! ```text
//! cargo run -p hma-core --example make_fixtures -- <output-dir>
//! ```

use std::path::PathBuf;

use hma_core::synthetic::{six_cohort_fixture, write_fixture_csv};

fn main() {
    let dir: PathBuf = std::env::args()
        .nth(1)
        .expect("usage: make_fixtures <output-dir>")
        .into();
    std::fs::create_dir_all(&dir).expect("create output directory");
    for cohort in six_cohort_fixture() {
        let path = dir.join(format!("{}.csv", cohort.cohort_id));
        write_fixture_csv(&cohort, &path).expect("write fixture");
        println!("wrote {}", path.display());
    }
}
