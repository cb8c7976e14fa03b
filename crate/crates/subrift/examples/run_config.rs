//! Configuration text as the CLI reads it, and its canonical echo.

use subrift::cli::{Command, RunConfig};

fn main() {
    let mut cfg = RunConfig::parse("# a bridge run\nmodel=heisenberg\ny=1,0,0\neps=0.1,0.05\nseed=7\n").unwrap();
    cfg.set("n", "5000").unwrap();
    let model = cfg.resolve(Command::VerifyClt).unwrap();
    println!("{} (d = {}), x defaulted to {:?}", model.name, model.d, cfg.x);
    print!("{}", cfg.canonical());
    println!("{:?}", RunConfig::parse("bogus=1").unwrap_err());
}
