use std::net::TcpListener;
use std::time::{Duration, Instant};

use flowmon::coordinator::{DeviceFile, SensorSpec};
use flowmon::experiment::{self, set_up_venue, LocalStack, StackConfig};
use flowmon::net::{DeviceHandle, LinkOptions};
use flowmon::sim::{make_test_day_with, DayParams};
use flowmon::thermal::PipelineConfig;

fn day(passes: u32, seed: u64) -> flowmon::sim::Scenario {
    let params = DayParams {
        day_length_s: 240.0,
        start_ms: experiment::SIM_EPOCH_MS,
        ..DayParams::default()
    };
    make_test_day_with(passes, seed, &params)
}

#[test]
fn ingestion_does_not_wait_for_a_stalled_broker() {
    // Accepts connections and never answers.
    let stalled = TcpListener::bind("127.0.0.1:0").unwrap();
    let file = DeviceFile {
        device_id: "door-9".into(),
        device_key: "ab".repeat(16),
        broker: stalled.local_addr().unwrap().to_string(),
        sensors: vec![SensorSpec {
            id: "door-9-main".into(),
            coverage: "main".into(),
        }],
    };
    let handle = DeviceHandle::start(LinkOptions::new(file)).unwrap();
    handle.ledger().lock().unwrap().set_location(Some("act-1".into()));
    let mut ingestor = handle.ingestor(PipelineConfig::default()).unwrap();

    let scenario = day(20, 3);
    let mut events = 0;
    let mut slowest = Duration::ZERO;
    for (frame, _) in scenario.render("door-9-main").unwrap() {
        let t = Instant::now();
        events += ingestor.on_frame(&frame).unwrap().len();
        slowest = slowest.max(t.elapsed());
    }
    assert!(events > 0);
    assert_eq!(handle.queue().len(), events, "every delta waits in the queue");
    assert!(!handle.status().connected);
    assert!(slowest < Duration::from_millis(250), "a frame took {slowest:?}");
    handle.stop();
}

#[test]
fn broker_restart_mid_day_loses_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = StackConfig::local(dir.path());
    let (stack, _) = LocalStack::start(&cfg).unwrap();
    // Come back on the same ports so the device finds the broker again.
    cfg.broker_listen = stack.broker.local_addr();
    cfg.http_listen = stack.http.local_addr();
    let sensor = "door-1-main".to_owned();
    let venue = set_up_venue(&stack, "door-1", std::slice::from_ref(&sensor)).unwrap();
    let device = DeviceHandle::start(LinkOptions::new(venue.device.clone())).unwrap();
    let config = device
        .wait_for(Duration::from_secs(10), |s| s.config.as_ref().is_some_and(|c| c.location_id.is_some()))
        .and_then(|s| s.config)
        .unwrap();
    let mut ingestor = device
        .ingestor(PipelineConfig {
            delta_threshold: config.delta_threshold(),
        })
        .unwrap();

    let scenario = day(30, 8);
    let frames: Vec<_> = scenario.render(&sensor).unwrap().map(|(f, _)| f).collect();
    let (first, second) = frames.split_at(frames.len() / 2);
    let mut net = 0i64;
    let mut count = 0;
    for f in first {
        for e in ingestor.on_frame(f).unwrap() {
            net += e.direction.sign();
            count += 1;
        }
    }
    stack.kill();
    for f in second {
        for e in ingestor.on_frame(f).unwrap() {
            net += e.direction.sign();
            count += 1;
        }
    }
    assert!(device.queue().len() > 0, "the outage should leave deltas queued");

    let (stack, report) = LocalStack::start(&cfg).unwrap();
    assert!(device.wait_idle(Duration::from_secs(30)), "queue did not drain after restart");
    assert!(device.status().sessions >= 2);
    let state = stack.durable_state();
    let line = state.lines().find(|l| l.starts_with(&venue.activity_id)).unwrap();
    let occupancy: i64 = line.split_whitespace().nth(1).unwrap().parse().unwrap();
    let underflow: i64 = line.split_whitespace().nth(3).unwrap().parse().unwrap();
    assert_eq!(occupancy - underflow, net, "{state}");
    let applied = stack.node().with_hub(|h| h.stats().deltas_applied) as usize;
    assert_eq!(report.journal_entries + applied, count);
    device.stop();
    stack.stop().unwrap();
}
