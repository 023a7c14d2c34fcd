use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

/// Backing storage of one daemon: one sparse sub-file per handle.
///
/// Reads beyond the end of a sub-file, or of holes inside it, yield zeros.
pub trait SubFileStore: Send {
    fn create(&mut self, handle: u64) -> io::Result<()>;
    fn remove(&mut self, handle: u64) -> io::Result<()>;
    fn write_at(&mut self, handle: u64, offset: u64, data: &[u8]) -> io::Result<()>;
    fn read_at(&mut self, handle: u64, offset: u64, buf: &mut [u8]) -> io::Result<()>;
    fn len(&mut self, handle: u64) -> io::Result<u64>;
    /// Handles currently present, sorted.
    fn handles(&mut self) -> io::Result<Vec<u64>>;
}

fn missing(handle: u64) -> io::Error {
    io::Error::new(io::ErrorKind::NotFound, format!("no sub-file for handle {handle}"))
}

/// Sub-files as `<dir>/<handle as 16 hex digits>.sub`.
pub struct DirStore {
    dir: PathBuf,
    open: HashMap<u64, File>,
}

impl DirStore {
    pub fn open(dir: impl AsRef<Path>) -> io::Result<Self> {
        fs::create_dir_all(dir.as_ref())?;
        Ok(DirStore { dir: dir.as_ref().to_path_buf(), open: HashMap::new() })
    }

    pub fn path_of(&self, handle: u64) -> PathBuf {
        self.dir.join(format!("{handle:016x}.sub"))
    }

    fn file(&mut self, handle: u64) -> io::Result<&File> {
        if !self.open.contains_key(&handle) {
            let f = OpenOptions::new().read(true).write(true).open(self.path_of(handle)).map_err(|e| {
                if e.kind() == io::ErrorKind::NotFound {
                    missing(handle)
                } else {
                    e
                }
            })?;
            self.open.insert(handle, f);
        }
        Ok(&self.open[&handle])
    }
}

impl SubFileStore for DirStore {
    fn create(&mut self, handle: u64) -> io::Result<()> {
        let f = OpenOptions::new().read(true).write(true).create_new(true).open(self.path_of(handle))?;
        self.open.insert(handle, f);
        Ok(())
    }

    fn remove(&mut self, handle: u64) -> io::Result<()> {
        self.open.remove(&handle);
        fs::remove_file(self.path_of(handle))
    }

    fn write_at(&mut self, handle: u64, offset: u64, data: &[u8]) -> io::Result<()> {
        self.file(handle)?.write_all_at(data, offset)
    }

    fn read_at(&mut self, handle: u64, offset: u64, buf: &mut [u8]) -> io::Result<()> {
        let f = self.file(handle)?;
        let mut got = 0;
        while got < buf.len() {
            match f.read_at(&mut buf[got..], offset + got as u64) {
                Ok(0) => break,
                Ok(n) => got += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e),
            }
        }
        buf[got..].fill(0);
        Ok(())
    }

    fn len(&mut self, handle: u64) -> io::Result<u64> {
        Ok(self.file(handle)?.metadata()?.len())
    }

    fn handles(&mut self) -> io::Result<Vec<u64>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let name = entry?.file_name();
            let name = name.to_string_lossy();
            if let Some(hex) = name.strip_suffix(".sub") {
                if let Ok(h) = u64::from_str_radix(hex, 16) {
                    out.push(h);
                }
            }
        }
        out.sort_unstable();
        Ok(out)
    }
}

/// In-memory store, for simulated clusters and tests.
#[derive(Default)]
pub struct MemStore {
    files: HashMap<u64, Vec<u8>>,
}

impl MemStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl SubFileStore for MemStore {
    fn create(&mut self, handle: u64) -> io::Result<()> {
        if self.files.contains_key(&handle) {
            return Err(io::ErrorKind::AlreadyExists.into());
        }
        self.files.insert(handle, Vec::new());
        Ok(())
    }

    fn remove(&mut self, handle: u64) -> io::Result<()> {
        self.files.remove(&handle).map(|_| ()).ok_or_else(|| missing(handle))
    }

    fn write_at(&mut self, handle: u64, offset: u64, data: &[u8]) -> io::Result<()> {
        let f = self.files.get_mut(&handle).ok_or_else(|| missing(handle))?;
        let end = offset as usize + data.len();
        if f.len() < end {
            f.resize(end, 0);
        }
        f[offset as usize..end].copy_from_slice(data);
        Ok(())
    }

    fn read_at(&mut self, handle: u64, offset: u64, buf: &mut [u8]) -> io::Result<()> {
        let f = self.files.get(&handle).ok_or_else(|| missing(handle))?;
        buf.fill(0);
        let start = (offset as usize).min(f.len());
        let end = (offset as usize + buf.len()).min(f.len());
        buf[..end - start].copy_from_slice(&f[start..end]);
        Ok(())
    }

    fn len(&mut self, handle: u64) -> io::Result<u64> {
        self.files.get(&handle).map(|f| f.len() as u64).ok_or_else(|| missing(handle))
    }

    fn handles(&mut self) -> io::Result<Vec<u64>> {
        let mut out: Vec<u64> = self.files.keys().copied().collect();
        out.sort_unstable();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exercise(store: &mut dyn SubFileStore) {
        store.create(0xab).unwrap();
        assert!(store.create(0xab).is_err());
        assert_eq!(store.len(0xab).unwrap(), 0);
        store.write_at(0xab, 10, b"hello").unwrap();
        assert_eq!(store.len(0xab).unwrap(), 15);
        let mut buf = [9u8; 20];
        store.read_at(0xab, 8, &mut buf).unwrap();
        assert_eq!(&buf[..9], b"\0\0hello\0\0");
        assert!(buf[9..].iter().all(|&b| b == 0));
        assert_eq!(store.handles().unwrap(), vec![0xab]);
        store.remove(0xab).unwrap();
        assert_eq!(store.read_at(0xab, 0, &mut buf).unwrap_err().kind(), io::ErrorKind::NotFound);
        assert!(store.handles().unwrap().is_empty());
    }

    #[test]
    fn mem_store_semantics() {
        exercise(&mut MemStore::new());
    }

    #[test]
    fn dir_store_semantics_and_naming() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = DirStore::open(dir.path()).unwrap();
        assert_eq!(s.path_of(0xab), dir.path().join("00000000000000ab.sub"));
        exercise(&mut s);
    }
}
