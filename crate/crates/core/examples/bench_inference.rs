//! Inference throughput of the desk detector for 8- and 16-frame clips.
//!
//! `cargo run --example bench_inference -- [clips]`

use actloc::cli::bench;
use actloc::config::RunConfig;

fn main() -> actloc::Result<()> {
    let clips = std::env::args().nth(1).map_or(20, |s| s.parse().expect("clip count"));
    for r in bench::<f32>(&RunConfig::desk(), None, clips)? {
        println!("{r}");
    }
    Ok(())
}
