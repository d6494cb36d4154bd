use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::Context;
use nextdit::Tensor;

pub fn prepare(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Opens `dir/name` for buffered writing.
pub fn create(dir: &Path, name: &str) -> anyhow::Result<(PathBuf, BufWriter<File>)> {
    let path = dir.join(name);
    let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok((path, BufWriter::new(file)))
}

/// Rows of `[n, d]` points under an `x0,…,x{d−1}` header.
pub fn write_points(dir: &Path, name: &str, points: &Tensor) -> anyhow::Result<PathBuf> {
    let (path, w) = create(dir, name)?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record((0..points.last_dim()).map(|i| format!("x{i}")))?;
    for r in 0..points.rows() {
        out.write_record(points.row(r).iter().map(|v| v.to_string()))?;
    }
    out.flush()?;
    Ok(path)
}
