//! One sensor's complete acquisition chain: thermal pipeline feeding a
//! tracker, producing sequenced passage events.

use crate::flow::{FlowEvent, FlowMeter};
use crate::sim::{Scenario, ScenarioError};
use crate::thermal::{PipelineConfig, PipelineError, SensorPipeline, ThermalFrame};

#[derive(Debug, Clone)]
pub struct FlowMeterUnit {
    pipeline: SensorPipeline,
    meter: FlowMeter,
}

impl FlowMeterUnit {
    pub fn new(sensor_id: &str, config: PipelineConfig) -> Result<Self, PipelineError> {
        Ok(Self {
            pipeline: SensorPipeline::new(sensor_id, config)?,
            meter: FlowMeter::new(sensor_id),
        })
    }

    pub fn sensor_id(&self) -> &str {
        self.pipeline.sensor_id()
    }

    pub fn pipeline(&self) -> &SensorPipeline {
        &self.pipeline
    }

    pub fn meter(&self) -> &FlowMeter {
        &self.meter
    }

    /// Processes one frame and returns the events it fired. Events also stay
    /// queued on the meter until drained.
    pub fn on_frame(&mut self, frame: &ThermalFrame) -> Result<Vec<FlowEvent>, PipelineError> {
        let before = self.pipeline.diagnostics().dropped_out_of_order;
        let clusters = self.pipeline.process_frame(frame)?;
        if self.pipeline.diagnostics().dropped_out_of_order != before {
            return Ok(Vec::new());
        }
        Ok(self.meter.on_frame(&clusters, frame.timestamp_ms()))
    }

    pub fn drain(&mut self) -> Vec<FlowEvent> {
        self.meter.drain()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AcquisitionError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

/// Renders a scenario and runs it through a fresh flow meter.
pub fn run_scenario(
    scenario: &Scenario,
    sensor_id: &str,
    config: PipelineConfig,
) -> Result<Vec<FlowEvent>, AcquisitionError> {
    let mut unit = FlowMeterUnit::new(sensor_id, config)?;
    let mut events = Vec::new();
    for (frame, _) in scenario.render(sensor_id)? {
        events.extend(unit.on_frame(&frame)?);
    }
    Ok(events)
}
