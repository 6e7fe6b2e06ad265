use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Subcommand};
use flowmon::experiment::{self, RunManifest};
use flowmon::sim::{make_test_day_with, DayParams};

use crate::Exit;

pub fn simulate(manifest: &Path) -> Result<()> {
    let m = RunManifest::load(manifest)?;
    let report = experiment::run(&m)?;
    print!("{}", report.to_table());
    println!("report: {}", m.output_dir.join("report.jsonl").display());
    if report.summary.complete {
        Ok(())
    } else {
        Err(Exit(2, "simulation incomplete".into()).into())
    }
}

#[derive(Args)]
pub struct QueryArgs {
    /// Activity id.
    activity: String,
    /// Registry base URL.
    #[arg(long, default_value = "http://127.0.0.1:8080")]
    registry: String,
    /// Bearer token, needed for activities that are not public.
    #[arg(long)]
    token: Option<String>,
}

pub fn query(a: QueryArgs) -> Result<()> {
    let url = format!("{}/activities/{}/occupancy", a.registry.trim_end_matches('/'), a.activity);
    let mut req = ureq::get(&url);
    if let Some(t) = &a.token {
        req = req.header("Authorization", &format!("Bearer {t}"));
    }
    let mut resp = match req.call() {
        Ok(r) => r,
        Err(ureq::Error::StatusCode(404)) => return Err(Exit(1, format!("activity {} not found", a.activity)).into()),
        Err(ureq::Error::StatusCode(code)) => return Err(Exit(1, format!("registry answered {code}")).into()),
        Err(e) => return Err(e).with_context(|| format!("querying {url}")),
    };
    let body: serde_json::Value = serde_json::from_str(&resp.body_mut().read_to_string()?)?;
    println!("occupancy {}", body["occupancy"]);
    match body.get("capacity") {
        Some(c) => println!("capacity {c}"),
        None => println!("capacity hidden"),
    }
    println!("as_of_ms {}", body["as_of_ms"]);
    Ok(())
}

#[derive(Subcommand)]
pub enum ScenarioCommand {
    /// Generate balanced single-door test days.
    Gen {
        /// Passes per day (rounded up to even).
        #[arg(long, default_value_t = 42)]
        passes: u32,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        days: u32,
        #[arg(long, default_value_t = 0.3)]
        noise: f64,
        /// Compressed day length in seconds.
        #[arg(long, default_value_t = DayParams::default().day_length_s)]
        day_length: f64,
        /// Output file, or directory when generating several days.
        /// Prints to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn scenario(cmd: ScenarioCommand) -> Result<()> {
    let ScenarioCommand::Gen {
        passes,
        seed,
        days,
        noise,
        day_length,
        out,
    } = cmd;
    let params = DayParams {
        noise_sigma_c: noise,
        day_length_s: day_length,
        ..DayParams::default()
    };
    let texts: Vec<String> = (0..days as u64)
        .map(|d| make_test_day_with(passes, seed.wrapping_add(d), &params).to_toml())
        .collect();
    match out {
        None => texts.iter().for_each(|t| print!("{t}")),
        Some(p) if days == 1 => fs::write(&p, &texts[0]).with_context(|| format!("writing {}", p.display()))?,
        Some(dir) => {
            fs::create_dir_all(&dir)?;
            for (i, t) in texts.iter().enumerate() {
                let p = dir.join(format!("day-{i:03}.toml"));
                fs::write(&p, t).with_context(|| format!("writing {}", p.display()))?;
            }
        }
    }
    Ok(())
}
