use std::fmt;

use thiserror::Error;

/// Side length of the raw sensor matrix.
pub const SENSOR_SIZE: usize = 8;
/// Upscale factor applied by interpolation.
pub const UPSCALE: usize = 3;
/// Side length of the upscaled grid.
pub const GRID_SIZE: usize = SENSOR_SIZE * UPSCALE;

pub const QUANTUM_C: f64 = 0.25;
pub const MIN_TEMP_C: f64 = 0.0;
pub const MAX_TEMP_C: f64 = 80.0;

pub type SensorCells = [[f64; SENSOR_SIZE]; SENSOR_SIZE];
pub type Grid = [[f64; GRID_SIZE]; GRID_SIZE];
pub type Mask = [[bool; GRID_SIZE]; GRID_SIZE];

#[derive(Debug, Error, PartialEq)]
pub enum FrameError {
    #[error("expected {expected} cells, got {got}")]
    CellCount { expected: usize, got: usize },
    #[error("cell {index} = {value} outside [{MIN_TEMP_C}, {MAX_TEMP_C}]")]
    OutOfRange { index: usize, value: f64 },
    #[error("cell {index} = {value} is not a multiple of {QUANTUM_C}")]
    NotQuantized { index: usize, value: f64 },
    #[error("invalid sensor id {0:?}")]
    SensorId(String),
    #[error("frame line has {0} tokens, expected 67")]
    TokenCount(usize),
    #[error("unparsable token {0:?}")]
    Token(String),
}

/// Returns true for identifiers usable as a topic level: `[A-Za-z0-9_-]+`.
pub fn is_valid_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

/// One raw 8x8 reading from a thermal array sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ThermalFrame {
    sensor_id: String,
    seq: u64,
    timestamp_ms: u64,
    cells: SensorCells,
}

impl ThermalFrame {
    pub fn new(
        sensor_id: impl Into<String>,
        seq: u64,
        timestamp_ms: u64,
        cells: SensorCells,
    ) -> Result<Self, FrameError> {
        let sensor_id = sensor_id.into();
        if !is_valid_id(&sensor_id) {
            return Err(FrameError::SensorId(sensor_id));
        }
        for (index, &value) in cells.iter().flatten().enumerate() {
            if !(MIN_TEMP_C..=MAX_TEMP_C).contains(&value) {
                return Err(FrameError::OutOfRange { index, value });
            }
            if (value / QUANTUM_C).fract() != 0.0 {
                return Err(FrameError::NotQuantized { index, value });
            }
        }
        Ok(Self {
            sensor_id,
            seq,
            timestamp_ms,
            cells,
        })
    }

    /// Builds a frame from a flat row-major cell slice.
    pub fn from_slice(
        sensor_id: impl Into<String>,
        seq: u64,
        timestamp_ms: u64,
        values: &[f64],
    ) -> Result<Self, FrameError> {
        if values.len() != SENSOR_SIZE * SENSOR_SIZE {
            return Err(FrameError::CellCount {
                expected: SENSOR_SIZE * SENSOR_SIZE,
                got: values.len(),
            });
        }
        let mut cells = [[0.0; SENSOR_SIZE]; SENSOR_SIZE];
        for (i, v) in values.iter().enumerate() {
            cells[i / SENSOR_SIZE][i % SENSOR_SIZE] = *v;
        }
        Self::new(sensor_id, seq, timestamp_ms, cells)
    }

    pub fn sensor_id(&self) -> &str {
        &self.sensor_id
    }

    pub fn seq(&self) -> u64 {
        self.seq
    }

    pub fn timestamp_ms(&self) -> u64 {
        self.timestamp_ms
    }

    pub fn cells(&self) -> &SensorCells {
        &self.cells
    }

    /// Parses one line of a frame dump: `sensor_id seq timestamp_ms t0 .. t63`.
    pub fn parse_line(line: &str) -> Result<Self, FrameError> {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 3 + SENSOR_SIZE * SENSOR_SIZE {
            return Err(FrameError::TokenCount(tokens.len()));
        }
        let num = |t: &str| t.parse::<u64>().map_err(|_| FrameError::Token(t.to_owned()));
        let seq = num(tokens[1])?;
        let timestamp_ms = num(tokens[2])?;
        let values = tokens[3..]
            .iter()
            .map(|t| {
                t.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| FrameError::Token((*t).to_owned()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_slice(tokens[0], seq, timestamp_ms, &values)
    }
}

/// Renders the frame-dump line form (no trailing newline).
impl fmt::Display for ThermalFrame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.sensor_id, self.seq, self.timestamp_ms)?;
        for v in self.cells.iter().flatten() {
            // Quarter-degree values are exact with two decimals.
            write!(f, " {v:.2}")?;
        }
        Ok(())
    }
}

/// Rounds to the sensor quantum and clamps into the valid range.
pub fn quantize(value: f64) -> f64 {
    ((value / QUANTUM_C).round() * QUANTUM_C).clamp(MIN_TEMP_C, MAX_TEMP_C)
}
