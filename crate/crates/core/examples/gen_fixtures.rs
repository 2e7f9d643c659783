//! Regenerates the committed corpora under `fixtures/`:
//!
//! ```text
//! cargo run -p glotta-core --example gen_fixtures
//! ```
//!
//! Output is a pure function of the seeds baked into the generators; the
//! `fixtures` integration test fails if the committed files drift.

use std::path::PathBuf;

use glotta_core::corpus::{synth, write_documents};
use glotta_core::{fsio, Result};

fn main() -> Result<()> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures");
    fsio::create_dir_all(&dir)?;
    synth::fixture_parallel()?.write_tsv(&dir.join("parallel_15lang.tsv"))?;
    write_documents(&dir.join("train_latin.jsonl"), &synth::fixture_latin()?)?;
    write_documents(
        &dir.join("train_en_ru_balanced.jsonl"),
        &synth::fixture_balanced()?,
    )?;
    write_documents(
        &dir.join("train_en_ru_imbalanced.jsonl"),
        &synth::fixture_imbalanced()?,
    )?;
    println!("fixtures regenerated in {}", dir.display());
    Ok(())
}
