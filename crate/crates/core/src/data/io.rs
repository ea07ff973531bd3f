//! Text formats for logs, sequences and frequency dumps.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Example, FrequencyTable, Interaction, InteractionLog, ItemId, SequenceDataset};
use crate::{Error, Result};

/// Reads `user<TAB>item<TAB>timestamp` lines; `#` starts a comment line and
/// blank lines are skipped. Line numbers in errors are 1-based.
pub fn load_interactions(path: &Path) -> Result<InteractionLog> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(&text)
}

pub(crate) fn parse_interactions(text: &str) -> Result<InteractionLog> {
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 3 tab-separated fields, got {}", fields.len()),
            });
        }
        let field = |i: usize, name: &str| -> Result<i64> {
            fields[i].trim().parse::<i64>().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("{name} {:?} is not an integer", fields[i]),
            })
        };
        let user = field(0, "user_id")?;
        let item = field(1, "item_id")?;
        let timestamp = field(2, "timestamp")?;
        if user < 0 || item < 0 {
            return Err(Error::Parse {
                line: line_no,
                message: "ids must be non-negative".into(),
            });
        }
        records.push(Interaction {
            user: user as u64,
            item: item as u64,
            timestamp,
        });
    }
    Ok(InteractionLog { records })
}

pub fn write_interactions(log: &InteractionLog, path: &Path) -> Result<()> {
    let mut out = String::from("# user_id\titem_id\ttimestamp\n");
    for r in &log.records {
        out.push_str(&format!("{}\t{}\t{}\n", r.user, r.item, r.timestamp));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct SequenceRecord {
    prefix: Vec<ItemId>,
    target: ItemId,
}

/// JSON-lines, one `{"prefix":[..],"target":..}` object per example.
pub fn write_sequences(ds: &SequenceDataset, path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for e in &ds.examples {
        let rec = SequenceRecord {
            prefix: e.prefix.clone(),
            target: e.target,
        };
        let line = serde_json::to_string(&rec).expect("sequence record serializes");
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    file.flush().map_err(|e| Error::io(path, e))
}

/// Loads a sequence file. The format carries no user ids, so every example is
/// attributed to user 0; the vocabulary is the identity over `0..=max id`.
pub fn load_sequences(path: &Path, max_len: usize) -> Result<SequenceDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut examples = Vec::new();
    let mut max_id = 0;
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: SequenceRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        if rec.prefix.is_empty() || rec.prefix.len() > max_len {
            return Err(Error::Parse {
                line: idx + 1,
                message: format!("prefix length must be in 1..={max_len}"),
            });
        }
        max_id = rec.prefix.iter().copied().chain([rec.target]).fold(max_id, usize::max);
        examples.push(Example {
            user: 0,
            prefix: rec.prefix,
            target: rec.target,
        });
    }
    Ok(SequenceDataset {
        examples,
        max_len,
        vocab: (0..=max_id as u64).collect(),
    })
}

/// On-disk form of a [`FrequencyTable`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrequencyDump {
    pub counts: BTreeMap<ItemId, u64>,
    pub head: Vec<ItemId>,
    pub tail: Vec<ItemId>,
}

impl From<&FrequencyTable> for FrequencyDump {
    fn from(t: &FrequencyTable) -> Self {
        FrequencyDump {
            counts: t.counts.iter().copied().enumerate().collect(),
            head: t.head.clone(),
            tail: t.tail.clone(),
        }
    }
}

impl FrequencyDump {
    /// Rebuilds the table; the stored split must match the recomputed one.
    pub fn to_table(&self) -> Result<FrequencyTable> {
        let n = self.counts.keys().next_back().map_or(0, |&k| k + 1);
        if self.counts.len() != n {
            return Err(Error::InvalidConfig("frequency dump ids are not dense".into()));
        }
        let table = FrequencyTable::from_counts(self.counts.values().copied().collect())?;
        if table.head != self.head || table.tail != self.tail {
            return Err(Error::InvalidConfig(
                "frequency dump head/tail disagree with counts".into(),
            ));
        }
        Ok(table)
    }
}

pub fn write_frequency_dump(table: &FrequencyTable, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(&FrequencyDump::from(table)).expect("dump serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_frequency_dump(path: &Path) -> Result<FrequencyTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dump: FrequencyDump = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })?;
    dump.to_table()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_two_records() {
        let log = parse_interactions("1\t5\t100\n1\t7\t200\n").unwrap();
        assert_eq!(log.len(), 2);
        assert_eq!(
            log.records[1],
            Interaction {
                user: 1,
                item: 7,
                timestamp: 200
            }
        );
    }

    #[test]
    fn empty_file_is_empty_log() {
        assert!(parse_interactions("").unwrap().is_empty());
    }

    #[test]
    fn comments_are_skipped() {
        let log = parse_interactions("# header\n2\t3\t4\n").unwrap();
        assert_eq!(log.len(), 1);
    }

    #[test]
    fn non_integer_field_reports_line() {
        match parse_interactions("1\tfoo\t100\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
        match parse_interactions("# c\n1\t2\t3\n1\t2\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_interactions(Path::new("/nonexistent/definitely/not/here.tsv")),
            Err(Error::Io { .. })
        ));
    }
}
