//! Append-only applied-event journal and periodic occupancy snapshots.
//!
//! Journal line: `location_id sensor_id event_seq direction timestamp_ms`.
//! Snapshot file: a `# journal_lines N` header, then one
//! `location_id occupancy as_of_ms` line per location, describing the state
//! after the first `N` journal lines.

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::flow::Direction;

#[derive(Debug, Error)]
pub enum JournalError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: corrupt record {text:?}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        text: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> JournalError + '_ {
    move |source| JournalError::Io {
        path: path.to_owned(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JournalEntry {
    pub location_id: String,
    pub sensor_id: String,
    pub event_seq: u64,
    pub direction: Direction,
    pub timestamp_ms: u64,
}

impl JournalEntry {
    pub fn parse(line: &str) -> Option<Self> {
        let t: Vec<&str> = line.split_whitespace().collect();
        if t.len() != 5 {
            return None;
        }
        Some(Self {
            location_id: t[0].to_owned(),
            sensor_id: t[1].to_owned(),
            event_seq: t[2].parse().ok()?,
            direction: t[3].parse().ok()?,
            timestamp_ms: t[4].parse().ok()?,
        })
    }
}

impl fmt::Display for JournalEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {} {}",
            self.location_id, self.sensor_id, self.event_seq, self.direction, self.timestamp_ms
        )
    }
}

#[derive(Debug)]
pub struct Journal {
    path: PathBuf,
    file: File,
    lines: u64,
}

impl Journal {
    /// Opens (creating if needed) and reads back every complete record.
    ///
    /// A torn final line, as left by a crash mid-append, is cut off; a bad
    /// record anywhere else is an error.
    pub fn open(path: &Path) -> Result<(Self, Vec<JournalEntry>), JournalError> {
        let mut entries = Vec::new();
        let mut valid_len = 0u64;
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(io_err(path))?);
            let mut pending_error = None;
            for (n, line) in reader.split(b'\n').enumerate() {
                let raw = line.map_err(io_err(path))?;
                if let Some(err) = pending_error.take() {
                    return Err(err);
                }
                let text = String::from_utf8_lossy(&raw);
                if text.trim().is_empty() {
                    valid_len += raw.len() as u64 + 1;
                    continue;
                }
                match JournalEntry::parse(&text) {
                    Some(e) => {
                        entries.push(e);
                        valid_len += raw.len() as u64 + 1;
                    }
                    None => {
                        pending_error = Some(JournalError::Corrupt {
                            path: path.to_owned(),
                            line: n + 1,
                            text: text.into_owned(),
                        })
                    }
                }
            }
            if pending_error.is_some() {
                tracing::warn!(path = %path.display(), "dropping torn final journal record");
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err(path))?;
        let on_disk = file.metadata().map_err(io_err(path))?.len();
        if on_disk > valid_len {
            file.set_len(valid_len).map_err(io_err(path))?;
        }
        Ok((
            Self {
                path: path.to_owned(),
                file,
                lines: entries.len() as u64,
            },
            entries,
        ))
    }

    /// Appends one record. The write reaches the OS before returning, so a
    /// killed process never loses an acknowledged event.
    pub fn append(&mut self, entry: &JournalEntry) -> Result<(), JournalError> {
        let line = format!("{entry}\n");
        self.file
            .write_all(line.as_bytes())
            .map_err(io_err(&self.path))?;
        self.lines += 1;
        Ok(())
    }

    pub fn lines(&self) -> u64 {
        self.lines
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Snapshot {
    pub journal_lines: u64,
    /// `(location_id, occupancy, as_of_ms)`
    pub locations: Vec<(String, u64, u64)>,
}

impl Snapshot {
    pub fn to_text(&self) -> String {
        let mut out = format!("# journal_lines {}\n", self.journal_lines);
        for (id, occ, as_of) in &self.locations {
            out.push_str(&format!("{id} {occ} {as_of}\n"));
        }
        out
    }

    pub fn parse(text: &str) -> Option<Self> {
        let mut lines = text.lines();
        let journal_lines = lines
            .next()?
            .strip_prefix("# journal_lines ")?
            .trim()
            .parse()
            .ok()?;
        let mut locations = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let t: Vec<&str> = line.split_whitespace().collect();
            if t.len() != 3 {
                return None;
            }
            locations.push((t[0].to_owned(), t[1].parse().ok()?, t[2].parse().ok()?));
        }
        Some(Self {
            journal_lines,
            locations,
        })
    }

    /// Writes via a temporary file and rename so readers never see a partial snapshot.
    pub fn write(&self, path: &Path) -> Result<(), JournalError> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_text()).map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Option<Self>, JournalError> {
        match fs::read_to_string(path) {
            Ok(text) => Ok(Self::parse(&text)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(path)(e)),
        }
    }
}
