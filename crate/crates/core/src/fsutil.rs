use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::Result;

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = temp_path(path);
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if res.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(res?)
}

/// Stages several files and renames them into place only once all writes succeeded.
pub fn write_all_atomic(files: &[(PathBuf, Vec<u8>)]) -> Result<()> {
    let mut staged = Vec::new();
    for (path, bytes) in files {
        let tmp = temp_path(path);
        let res = fs::File::create(&tmp).and_then(|mut f| f.write_all(bytes));
        staged.push(tmp);
        if let Err(e) = res {
            for t in &staged {
                let _ = fs::remove_file(t);
            }
            return Err(e.into());
        }
    }
    for ((path, _), tmp) in files.iter().zip(&staged) {
        fs::rename(tmp, path)?;
    }
    Ok(())
}
