//! Write a synthetic corpus to disk and drive the command-line pipeline over
//! it in-process: extract, build, query and eval.

use std::io::stdout;

use c2f::cli::{cmd_build, cmd_eval, cmd_extract, cmd_query, cmd_synth, open_store, QueryFlags, QuerySource};
use c2f::eval::Protocol;
use c2f::fusion::PipelineConfig;
use c2f::synthgen::SynthSpec;

fn main() -> c2f::Result<()> {
    let root = std::env::temp_dir().join(format!("c2f-example-{}", std::process::id()));
    let corpus = root.join("corpus");
    let store = root.join("store");
    cmd_synth(&SynthSpec { n_distractors: 32, ..SynthSpec::default() }, &corpus)?;

    let cfg = PipelineConfig { vocab_size: 32, candidates: 16, ..PipelineConfig::default() };
    let manifest = cmd_extract(&corpus.join("images.txt"), &corpus.join("descriptors.c2fd"), &store, &cfg, &mut std::io::stderr())?;
    println!("extracted, fingerprint {}", &manifest.fingerprint[..16]);
    cmd_build(&store, None)?;

    let loaded = open_store(&store)?;
    cmd_query(&loaded, &QuerySource::Database(0), &QueryFlags { candidates: Some(3), ..Default::default() }, &mut stdout())?;
    cmd_eval(&loaded, &corpus.join("ground_truth.txt"), Protocol::HolidaysLike, &QueryFlags::default(), &mut stdout(), None)?;
    std::fs::remove_dir_all(&root)?;
    Ok(())
}
