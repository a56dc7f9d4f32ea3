//! File formats: gridded densities as CSV with a JSON grid sidecar, and
//! path batches as a flat little-endian binary.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use runmax_core::mc::{PathBatch, StreamDescriptor};
use runmax_core::model::{JointDensityGrid, Provenance, TriangularGrid};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, AppError, AppResult};

/// Decimal text for a float with 17 significant digits, so that parsing
/// returns the same bits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Grid and provenance stored next to a density CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensitySidecar {
    pub provenance: Provenance,
    pub grid: TriangularGrid,
}

/// `density.csv` → `density.grid.json`.
pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("grid.json")
}

fn header(d: usize) -> Vec<String> {
    let mut h: Vec<String> = ["slice", "im", "ix", "e", "t", "m"].iter().map(|s| s.to_string()).collect();
    h.extend((1..=d).map(|k| format!("x{k}")));
    h.push("value".into());
    h
}

/// Writes one row per active node and slice, plus the sidecar.
pub fn write_density(path: &Path, p: &JointDensityGrid) -> AppResult<()> {
    let g = &p.grid;
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let wr = |w: &mut BufWriter<File>, line: &str| writeln!(w, "{line}").map_err(io_err(path));
    wr(&mut w, &header(g.d).join(","))?;
    let mut xt = vec![0.0; g.d.saturating_sub(1)];
    for (s, t) in g.times.iter().enumerate() {
        for im in 0..g.n_m() {
            let Some(end) = g.row_end(im) else { continue };
            let m = fmt_f64(g.m_at(im));
            for ix in 0..=end {
                let x1 = fmt_f64(g.x_at(ix));
                for e in 0..g.n_extra() {
                    g.extra_point(e, &mut xt);
                    let mut line = format!("{s},{im},{ix},{e},{},{m},{x1}", fmt_f64(*t));
                    for v in &xt {
                        line.push(',');
                        line.push_str(&fmt_f64(*v));
                    }
                    line.push(',');
                    line.push_str(&fmt_f64(p.at(s, im, ix, e)));
                    wr(&mut w, &line)?;
                }
            }
        }
    }
    w.flush().map_err(io_err(path))?;
    let side = DensitySidecar { provenance: p.provenance, grid: (**g).clone() };
    write_json(&sidecar_path(path), &side)
}

/// Reads a density written by [`write_density`]; every row is checked
/// against the grid and errors carry the file line number.
pub fn read_density(path: &Path) -> AppResult<JointDensityGrid> {
    let side_path = sidecar_path(path);
    let side_text = std::fs::read_to_string(&side_path).map_err(io_err(&side_path))?;
    let side: DensitySidecar = serde_json::from_str(&side_text)
        .map_err(|e| AppError::Parse { path: side_path.clone(), line: e.line() as u64, message: e.to_string() })?;
    side.grid
        .validate()
        .map_err(|e| AppError::Parse { path: side_path.clone(), line: 1, message: e.to_string() })?;
    let grid = Arc::new(side.grid);
    let g = &grid;
    let mut out = JointDensityGrid::zeros(grid.clone(), side.provenance);
    let mut seen = vec![vec![false; g.slice_len()]; g.n_slices()];
    let mut reader =
        csv::ReaderBuilder::new().has_headers(true).from_reader(BufReader::new(File::open(path).map_err(io_err(path))?));
    let parse_err = |line: u64, message: String| AppError::Parse { path: path.to_path_buf(), line, message };
    let expected = header(g.d);
    let got = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if got.iter().ne(expected.iter().map(|s| s.as_str())) {
        return Err(parse_err(1, format!("expected header {}", expected.join(","))));
    }
    let mut xt = vec![0.0; g.d.saturating_sub(1)];
    for rec in reader.records() {
        let rec = rec.map_err(|e| parse_err(e.position().map(|p| p.line()).unwrap_or(0), e.to_string()))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != expected.len() {
            return Err(parse_err(line, format!("expected {} fields, found {}", expected.len(), rec.len())));
        }
        let int = |k: usize| -> AppResult<usize> {
            rec[k].trim().parse::<usize>().map_err(|e| parse_err(line, format!("field {}: {e}", expected[k])))
        };
        let float = |k: usize| -> AppResult<f64> {
            let v = rec[k].trim().parse::<f64>().map_err(|e| parse_err(line, format!("field {}: {e}", expected[k])))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(parse_err(line, format!("field {} is not finite", expected[k])))
            }
        };
        let (s, im, ix, e) = (int(0)?, int(1)?, int(2)?, int(3)?);
        if s >= g.n_slices() || im >= g.n_m() || ix >= g.n_x() || e >= g.n_extra() || !g.is_active(im, ix) {
            return Err(parse_err(line, format!("node ({s}, {im}, {ix}, {e}) is not an active grid node")));
        }
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + b.abs());
        g.extra_point(e, &mut xt);
        let mut coords_ok = close(float(4)?, g.times[s]) && close(float(5)?, g.m_at(im)) && close(float(6)?, g.x_at(ix));
        for (k, v) in xt.iter().enumerate() {
            coords_ok &= close(float(7 + k)?, *v);
        }
        if !coords_ok {
            return Err(parse_err(line, "coordinates disagree with the grid indices".into()));
        }
        let k = g.idx(im, ix, e);
        if seen[s][k] {
            return Err(parse_err(line, "duplicate node".into()));
        }
        seen[s][k] = true;
        out.values[s][k] = float(expected.len() - 1)?;
    }
    let missing: usize = (0..g.n_slices())
        .map(|s| {
            (0..g.n_m())
                .flat_map(|im| (0..g.n_x()).map(move |ix| (im, ix)))
                .filter(|&(im, ix)| g.is_active(im, ix))
                .flat_map(|(im, ix)| (0..g.n_extra()).map(move |e| g.idx(im, ix, e)))
                .filter(|&k| !seen[s][k])
                .count()
        })
        .sum();
    if missing > 0 {
        let last = reader.position().line();
        return Err(parse_err(last, format!("{missing} active nodes have no row")));
    }
    out.trace_from_diagonal();
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> AppResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

/// Writes a CSV from a header and pre-formatted rows.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> AppResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| AppError::Io { path: path.to_path_buf(), source: e.into() })?;
    let to_io = |e: csv::Error| AppError::Io { path: path.to_path_buf(), source: e.into() };
    w.write_record(header).map_err(to_io)?;
    for r in rows {
        w.write_record(r).map_err(to_io)?;
    }
    w.flush().map_err(io_err(path))
}

const BATCH_MAGIC: &[u8; 8] = b"RMAXPB01";

/// Scalar part of a batch file; the arrays follow as raw `f64` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BatchHeader {
    d: usize,
    n_paths: usize,
    n_steps: usize,
    dt: f64,
    horizon: f64,
    bridge: bool,
    stream: StreamDescriptor,
    times: Vec<f64>,
    excluded: usize,
    weighted: bool,
}

/// Layout: magic, `u64` header length, JSON header, then little-endian
/// `f64` arrays: starts, per snapshot states, per snapshot suprema, per
/// snapshot weights when present.
pub fn write_batch(path: &Path, b: &PathBatch) -> AppResult<()> {
    let header = BatchHeader {
        d: b.d,
        n_paths: b.n_paths,
        n_steps: b.n_steps,
        dt: b.dt,
        horizon: b.horizon,
        bridge: b.bridge,
        stream: b.stream.clone(),
        times: b.times.clone(),
        excluded: b.excluded,
        weighted: b.weights.is_some(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(io_err(path));
    put(BATCH_MAGIC)?;
    put(&(json.len() as u64).to_le_bytes())?;
    put(&json)?;
    let mut arrays: Vec<&[f64]> = vec![&b.starts];
    arrays.extend(b.states.iter().map(|v| v.as_slice()));
    arrays.extend(b.sups.iter().map(|v| v.as_slice()));
    if let Some(ws) = &b.weights {
        arrays.extend(ws.iter().map(|v| v.as_slice()));
    }
    for a in arrays {
        for v in a {
            put(&v.to_le_bytes())?;
        }
    }
    w.flush().map_err(io_err(path))
}

pub fn read_batch(path: &Path) -> AppResult<PathBatch> {
    let bad = |message: String| AppError::Batch { path: path.to_path_buf(), message };
    let mut r = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err(path))?;
    if &magic != BATCH_MAGIC {
        return Err(bad("wrong magic bytes".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(io_err(path))?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 24 {
        return Err(bad(format!("header length {len} is implausible")));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(io_err(path))?;
    let h: BatchHeader = serde_json::from_slice(&json).map_err(|e| bad(format!("header: {e}")))?;
    let mut read_vec = |n: usize| -> AppResult<Vec<f64>> {
        let mut buf = vec![0u8; 8 * n];
        r.read_exact(&mut buf).map_err(|e| bad(format!("truncated data: {e}")))?;
        Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of eight"))).collect())
    };
    let snaps = h.times.len();
    let starts = read_vec(h.n_paths)?;
    let states = (0..snaps).map(|_| read_vec(h.n_paths * h.d)).collect::<AppResult<Vec<_>>>()?;
    let sups = (0..snaps).map(|_| read_vec(h.n_paths)).collect::<AppResult<Vec<_>>>()?;
    let weights =
        if h.weighted { Some((0..snaps).map(|_| read_vec(h.n_paths)).collect::<AppResult<Vec<_>>>()?) } else { None };
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(io_err(path))?;
    if !rest.is_empty() {
        return Err(bad(format!("{} trailing bytes", rest.len())));
    }
    Ok(PathBatch {
        d: h.d,
        n_paths: h.n_paths,
        n_steps: h.n_steps,
        dt: h.dt,
        horizon: h.horizon,
        bridge: h.bridge,
        stream: h.stream,
        times: h.times,
        states,
        sups,
        starts,
        weights,
        excluded: h.excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use runmax_core::brownian::exact_density;
    use runmax_core::mc::simulate;
    use runmax_core::model::{build_model, sqrt_graded_times, Drift, DriftSpec, Initial, InitialSpec};

    fn zero_model(d: usize) -> runmax_core::model::ModelSpec {
        build_model(Drift::Known(DriftSpec::Zero), Initial::Known(InitialSpec::Gaussian { mean: vec![0.0; d], width: 1e-3 }), d)
            .unwrap()
    }

    #[test]
    fn density_round_trips_bit_for_bit() {
        let dir = tempfile::tempdir().unwrap();
        for d in [1, 2] {
            let m = zero_model(d);
            let g = Arc::new(TriangularGrid::boxed(d, 4.0, 17, 5, sqrt_graded_times(1.0, 3), 1.0).unwrap());
            let p = exact_density(&m, g).unwrap();
            let path = dir.path().join(format!("p{d}.csv"));
            write_density(&path, &p).unwrap();
            let q = read_density(&path).unwrap();
            assert_eq!(p, q);
        }
    }

    #[test]
    fn malformed_rows_report_their_line() {
        let dir = tempfile::tempdir().unwrap();
        let m = zero_model(1);
        let g = Arc::new(TriangularGrid::boxed(1, 4.0, 9, 1, sqrt_graded_times(1.0, 2), 1.0).unwrap());
        let path = dir.path().join("p.csv");
        write_density(&path, &exact_density(&m, g).unwrap()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[4] = lines[4].replacen(",", ",x", 1);
        std::fs::write(&path, lines.join("\n") + "\n").unwrap();
        match read_density(&path) {
            Err(AppError::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn batch_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let b = simulate(&zero_model(2), 0.5, 10, 50, true, 4).unwrap();
        let path = dir.path().join("b.bin");
        write_batch(&path, &b).unwrap();
        assert_eq!(read_batch(&path).unwrap(), b);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_batch(&path), Err(AppError::Batch { .. })));
    }
}
