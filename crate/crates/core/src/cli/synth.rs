use super::{Outcome, RunConfig, SynthArgs};
use crate::error::Result;
use crate::synth::generate;

pub(super) fn run(args: &SynthArgs, cfg: &RunConfig) -> Result<Outcome> {
    let scenario = generate(&cfg.synth)?;
    scenario.write_dir(&args.out)?;
    println!(
        "wrote {} frames and {} depth frames to {}",
        scenario.frames.len(),
        scenario.depth.as_ref().map_or(0, |d| d.depths.len()),
        args.out.display()
    );
    Ok(Outcome::Success)
}
