//! Regenerate the bundled desk corpus: `data/desk/*.wav` plus a manifest.
//!
//! cargo run -p ezvc --example bundle_desk_corpus [OUT_DIR]
use std::path::PathBuf;

use ezvc::audio::write_waveform;
use ezvc::pipeline::{write_jsonl, ManifestEntry};
use ezvc::synth::desk_corpus;

fn main() -> ezvc::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/desk"));
    std::fs::create_dir_all(&out).map_err(|e| ezvc::Error::io(&out, e))?;
    let mut manifest = Vec::new();
    for u in desk_corpus() {
        let name = format!("{}.wav", u.id);
        write_waveform(out.join(&name), &u.waveform)?;
        manifest.push(ManifestEntry {
            id: u.id,
            audio_path: PathBuf::from(name),
            language: Some("synthetic".into()),
        });
    }
    write_jsonl(&out.join("manifest.jsonl"), &manifest)?;
    println!("wrote {} utterances to {}", manifest.len(), out.display());
    Ok(())
}
