//! Run configuration files: presets, overrides, the canonical rendering and
//! its hash, and error messages for bad keys.

use smdk::config::RunConfig;

const TEXT: &str = "\
preset = paper-tiny
output_dir = runs
[model]
method = smoe_learned
[train]
steps = 500
seed = 3
data_path = corpus.txt
";

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let rc = RunConfig::parse(TEXT)?;
    println!("hash {}", rc.hash());
    println!("sweep ks {:?}", rc.sweep_ks());
    print!("{}", rc.render());

    // The rendering parses back to the same run.
    assert_eq!(RunConfig::parse(&rc.render())?.hash(), rc.hash());

    let bad = TEXT.replace("steps = 500", "stpes = 500");
    println!("typo: {}", RunConfig::parse(&bad).unwrap_err());
    Ok(())
}
