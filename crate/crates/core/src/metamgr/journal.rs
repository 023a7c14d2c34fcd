use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::FileMeta;

/// One metadata mutation, stored as a JSON line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Record {
    Create { meta: FileMeta },
    Remove { path: String },
    Size { handle: u64, size: u64 },
}

/// Append-only record file.
pub struct Journal {
    path: PathBuf,
    file: File,
}

impl Journal {
    /// Opens (creating if needed) and returns the records already present.
    /// A final line cut short by a crash is dropped and truncated away.
    pub fn open(path: impl AsRef<Path>) -> io::Result<(Self, Vec<Record>)> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let mut records = Vec::new();
        let mut good_len = 0u64;
        if path.exists() {
            let mut reader = BufReader::new(File::open(&path)?);
            let mut line = String::new();
            loop {
                line.clear();
                let n = reader.read_line(&mut line)?;
                if n == 0 {
                    break;
                }
                let complete = line.ends_with('\n');
                match serde_json::from_str::<Record>(line.trim_end()) {
                    Ok(r) if complete => {
                        records.push(r);
                        good_len += n as u64;
                    }
                    _ => {
                        // only a torn tail is tolerated
                        let mut rest = String::new();
                        if reader.read_line(&mut rest)? != 0 {
                            return Err(io::Error::new(
                                io::ErrorKind::InvalidData,
                                format!("corrupt journal record at byte {good_len}"),
                            ));
                        }
                        break;
                    }
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        file.set_len(good_len)?;
        Ok((Journal { path, file }, records))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, record: &Record) -> io::Result<()> {
        let mut line = serde_json::to_string(record).map_err(io::Error::other)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.sync_data()
    }
}
