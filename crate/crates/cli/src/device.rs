use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::Subcommand;
use flowmon::broker::{DeviceKey, Whitelist, DEFAULT_DEVICE_TYPE};
use flowmon::coordinator::{DeviceFile, SensorSpec};
use flowmon::hub::HubConfig;
use flowmon::net::{DeviceHandle, Ingestor, LinkError, LinkOptions};
use flowmon::sim::Scenario;
use flowmon::thermal::{PipelineConfig, ThermalFrame};

use crate::Exit;

#[derive(Subcommand)]
pub enum DeviceCommand {
    /// Connect a coordinator to the broker and forward passage events.
    Run {
        /// Device file (TOML). Rewritten when the server rotates the key.
        #[arg(long)]
        config: PathBuf,
        /// Scenario to render and feed through the sensors. Repeatable.
        #[arg(long)]
        scenario: Vec<PathBuf>,
        /// Frame dump to feed (`sensor seq timestamp_ms v0 .. v63` lines).
        #[arg(long)]
        frames: Option<PathBuf>,
        /// Exit once every input has been processed and acknowledged.
        #[arg(long)]
        exit_when_done: bool,
    },
    /// Add a device to a whitelist file and write its device file.
    Enroll {
        #[arg(long)]
        whitelist: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long = "type", default_value = DEFAULT_DEVICE_TYPE)]
        device_type: String,
        /// Broker address recorded in the device file.
        #[arg(long, default_value = "127.0.0.1:1883")]
        broker: String,
        /// Sensor id attached to the device. Repeatable.
        #[arg(long)]
        sensor: Vec<String>,
        /// Where to write the device file.
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run(cmd: DeviceCommand) -> Result<()> {
    match cmd {
        DeviceCommand::Run {
            config,
            scenario,
            frames,
            exit_when_done,
        } => run_device(&config, &scenario, frames.as_deref(), exit_when_done),
        DeviceCommand::Enroll {
            whitelist,
            id,
            device_type,
            broker,
            sensor,
            out,
        } => enroll(&whitelist, &id, &device_type, &broker, &sensor, &out),
    }
}

fn link_failure(e: LinkError) -> anyhow::Error {
    match e {
        LinkError::Unauthorized(_) => Exit(3, e.to_string()).into(),
        _ => Exit(2, e.to_string()).into(),
    }
}

fn run_device(path: &Path, scenarios: &[PathBuf], frames: Option<&Path>, exit_when_done: bool) -> Result<()> {
    let file = DeviceFile::load(path).with_context(|| format!("reading {}", path.display()))?;
    let scenarios = scenarios
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Scenario::from_toml(&text).with_context(|| format!("parsing {}", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let sensors = file.sensor_specs();
    let options = LinkOptions {
        file_path: Some(path.to_owned()),
        ..LinkOptions::new(file)
    };
    let handle = DeviceHandle::start(options)?;
    let has_input = !scenarios.is_empty() || frames.is_some();
    if !has_input {
        return match handle.join() {
            Some(e) => Err(link_failure(e)),
            None => Ok(()),
        };
    }

    // Inputs are only forwarded once the coordinator has a location.
    let status = loop {
        if let Some(s) = handle.wait_for(Duration::from_secs(5), |s| {
            s.config.as_ref().is_some_and(|c| c.location_id.is_some())
        }) {
            break s;
        }
        tracing::info!("waiting for provisioning with a location");
    };
    if let Some(e) = status.error {
        return Err(link_failure(e));
    }
    let config = status.config.expect("waited for a config");
    let mut ingestor = handle.ingestor(PipelineConfig {
        delta_threshold: config.delta_threshold(),
    })?;
    let sensor = &sensors[0].id;
    let mut offset = 0;
    for s in &scenarios {
        for (frame, _) in s.render(sensor)? {
            let frame = ThermalFrame::new(frame.sensor_id(), offset + frame.seq(), frame.timestamp_ms(), *frame.cells())?;
            feed(&mut ingestor, &frame)?;
        }
        offset += s.frame_count();
    }
    if let Some(p) = frames {
        let f = fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
        for line in BufReader::new(f).lines() {
            let line = line?;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            feed(&mut ingestor, &ThermalFrame::parse_line(&line)?)?;
        }
    }
    let stats = ingestor.stats();
    tracing::info!(frames = stats.frames, events = stats.events, deltas = stats.deltas, "input processed");
    let started = Instant::now();
    while !handle.wait_idle(Duration::from_secs(5)) {
        if let Some(e) = handle.status().error {
            return Err(link_failure(e));
        }
        tracing::info!(pending = handle.queue().len(), waited_s = started.elapsed().as_secs(), "waiting for acknowledgements");
    }
    if exit_when_done {
        return match handle.stop() {
            Some(e) => Err(link_failure(e)),
            None => Ok(()),
        };
    }
    match handle.join() {
        Some(e) => Err(link_failure(e)),
        None => Ok(()),
    }
}

fn feed(ingestor: &mut Ingestor, frame: &ThermalFrame) -> Result<()> {
    for e in ingestor.on_frame(frame)? {
        println!("{e}");
    }
    Ok(())
}

fn enroll(whitelist: &Path, id: &str, device_type: &str, broker: &str, sensors: &[String], out: &Path) -> Result<()> {
    let mut wl: Whitelist = HubConfig::load_whitelist(whitelist)?;
    if wl.has_device(id) {
        bail!("device {id:?} is already enrolled");
    }
    let key = DeviceKey::generate(&mut rand::rng());
    wl.add_device(id, device_type, key)?;
    let tmp = whitelist.with_extension("tmp");
    fs::write(&tmp, wl.to_text())?;
    fs::rename(&tmp, whitelist)?;
    let file = DeviceFile {
        device_id: id.to_owned(),
        device_key: key.to_hex(),
        broker: broker.to_owned(),
        sensors: sensors
            .iter()
            .map(|s| SensorSpec {
                id: s.clone(),
                coverage: String::new(),
            })
            .collect(),
    };
    file.validate()?;
    file.save(out)?;
    println!("enrolled {id}; device file written to {}", out.display());
    Ok(())
}
