//! Documented-event catalog. A selector is "hidden" when it is absent here.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::event_space::EventSelector;

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("catalog i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("catalog csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("catalog line {line}: {reason}")]
    Row { line: u64, reason: String },
    #[error("catalog line {line}: duplicate selector {selector} (first seen as `{first}`)")]
    Duplicate {
        line: u64,
        selector: EventSelector,
        first: String,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EventCatalog {
    entries: BTreeMap<EventSelector, String>,
    pub source: String,
}

fn parse_hex_u8(field: &str) -> Option<u8> {
    let hex = field.trim().strip_prefix("0x").or_else(|| field.trim().strip_prefix("0X"))?;
    u8::from_str_radix(hex, 16).ok()
}

impl EventCatalog {
    pub fn new(source: impl Into<String>) -> Self {
        Self {
            entries: BTreeMap::new(),
            source: source.into(),
        }
    }

    /// Adds an entry; returns the previous name if the selector was already present.
    pub fn insert(&mut self, selector: EventSelector, name: impl Into<String>) -> Option<String> {
        self.entries.insert(selector, name.into())
    }

    pub fn contains(&self, selector: EventSelector) -> bool {
        self.entries.contains_key(&selector)
    }

    pub fn name(&self, selector: EventSelector) -> Option<&str> {
        self.entries.get(&selector).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (EventSelector, &str)> {
        self.entries.iter().map(|(s, n)| (*s, n.as_str()))
    }

    /// Reads `event_code,umask,name` CSV. Duplicate selectors are an error.
    pub fn from_reader(reader: impl Read, source: impl Into<String>) -> Result<Self, CatalogError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["event_code", "umask", "name"] {
            return Err(CatalogError::Row {
                line: 1,
                reason: format!("expected header `event_code,umask,name`, found `{}`", headers.iter().collect::<Vec<_>>().join(",")),
            });
        }
        let mut catalog = Self::new(source);
        for record in rdr.records() {
            let record = record?;
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            if record.len() != 3 {
                return Err(CatalogError::Row {
                    line,
                    reason: format!("expected 3 columns, found {}", record.len()),
                });
            }
            let code = parse_hex_u8(&record[0]).ok_or_else(|| CatalogError::Row {
                line,
                reason: format!("bad event_code `{}`", &record[0]),
            })?;
            let umask = parse_hex_u8(&record[1]).ok_or_else(|| CatalogError::Row {
                line,
                reason: format!("bad umask `{}`", &record[1]),
            })?;
            let selector = EventSelector::new(code, umask);
            if let Some(first) = catalog.entries.get(&selector) {
                return Err(CatalogError::Duplicate {
                    line,
                    selector,
                    first: first.clone(),
                });
            }
            catalog.entries.insert(selector, record[2].to_string());
        }
        Ok(catalog)
    }

    pub fn load(path: &Path) -> Result<Self, CatalogError> {
        let file = std::fs::File::open(path)?;
        Self::from_reader(file, path.display().to_string())
    }

    pub fn write_csv(&self, writer: impl Write) -> Result<(), CatalogError> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["event_code", "umask", "name"])?;
        for (s, name) in &self.entries {
            wtr.write_record([
                format!("0x{:02X}", s.event_code),
                format!("0x{:02X}", s.umask),
                name.clone(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

pub fn is_documented(s: EventSelector, catalog: &EventCatalog) -> bool {
    catalog.contains(s)
}
