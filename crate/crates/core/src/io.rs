//! File formats: voxel label maps, raw float64 arrays with a text sidecar, delimited
//! tables and material tables.
//!
//! Raw arrays are little-endian. The sidecar sits next to the array as `<file>.meta`
//! with one `key = value` line per entry.

use crate::error::{Error, Result};
use crate::fields::{BoundaryField, SpeciesField};
use crate::phase_space::{PhaseSpace, RegionLabel};
use crate::xsec::TabulatedCrossSection;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Writes `bytes` to a temporary file beside `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json_atomic<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value).map_err(|e| Error::Invalid(format!("serializing {}: {e}", path.display())))?;
    write_atomic(path, s.as_bytes())
}

/// Voxel labels, one byte per voxel, x fastest.
pub fn read_labels(path: &Path, dims: [usize; 3]) -> Result<Vec<RegionLabel>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let n = dims[0] * dims[1] * dims[2];
    if bytes.len() != n {
        return Err(Error::Parse {
            path: path.display().to_string(),
            msg: format!("label file has {} bytes, dims {:?} need {n}", bytes.len(), dims),
        });
    }
    bytes.into_iter().map(RegionLabel::from_u8).collect()
}

pub fn write_labels(path: &Path, labels: &[RegionLabel]) -> Result<()> {
    let bytes: Vec<u8> = labels.iter().map(|l| l.to_u8()).collect();
    write_atomic(path, &bytes)
}

fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Writes the array and its sidecar. `meta` entries are written in order after `count`.
pub fn write_raw_f64(path: &Path, data: &[f64], meta: &[(String, String)]) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 * data.len());
    for x in data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    write_atomic(path, &bytes)?;
    let mut text = format!("format = f64le\ncount = {}\n", data.len());
    for (k, v) in meta {
        text.push_str(&format!("{k} = {v}\n"));
    }
    write_atomic(&meta_path(path), text.as_bytes())
}

/// Reads an array written by [`write_raw_f64`] and its sidecar entries.
/// `key = value` pairs of a `.meta` sidecar.
pub type Meta = Vec<(String, String)>;

pub fn read_raw_f64(path: &Path) -> Result<(Vec<f64>, Meta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |msg: String| Error::Parse {
        path: path.display().to_string(),
        msg,
    };
    if bytes.len() % 8 != 0 {
        return Err(parse_err(format!("{} bytes is not a whole number of f64 values", bytes.len())));
    }
    let data: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let mp = meta_path(path);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let mut meta = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| parse_err(format!("bad sidecar line {line:?}")))?;
        meta.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some((_, c)) = meta.iter().find(|(k, _)| k == "count") {
        if c.parse::<usize>().ok() != Some(data.len()) {
            return Err(parse_err(format!("sidecar count {c} does not match {} values", data.len())));
        }
    }
    Ok((data, meta))
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Sidecar entries describing the grids of `space`.
pub fn grid_meta(space: &PhaseSpace) -> Vec<(String, String)> {
    let sg = &space.spatial;
    vec![
        ("dims".into(), join(&sg.dims)),
        ("spacing".into(), join(&sg.spacing)),
        ("origin".into(), join(&sg.origin)),
        ("n_dir".into(), space.sphere.len().to_string()),
        ("energy_levels".into(), join(&space.energy.levels)),
    ]
}

/// Per-voxel values expanded to the full box (x fastest), zero outside G.
pub fn expand_to_box(space: &PhaseSpace, values: &[f64]) -> Result<Vec<f64>> {
    let sg = &space.spatial;
    if values.len() != sg.n_active() {
        return Err(Error::Shape(format!("{} voxel values for {} active voxels", values.len(), sg.n_active())));
    }
    let mut out = vec![0.0; sg.dims.iter().product()];
    for (a, v) in values.iter().enumerate() {
        out[sg.grid_index(a)] = *v;
    }
    Ok(out)
}

/// A voxel field (dose, for instance) as a full-box volume.
pub fn write_volume(path: &Path, space: &PhaseSpace, values: &[f64], quantity: &str) -> Result<()> {
    let mut meta = vec![
        ("quantity".to_string(), quantity.to_string()),
        ("ordering".into(), "x fastest, then y, then z".into()),
    ];
    meta.extend(grid_meta(space));
    write_raw_f64(path, &expand_to_box(space, values)?, &meta)
}

/// A flux on the active voxels in the solver's layout.
pub fn write_species_field(path: &Path, space: &PhaseSpace, field: &SpeciesField, quantity: &str) -> Result<()> {
    let ly = field.layout;
    let mut meta = vec![
        ("quantity".to_string(), quantity.to_string()),
        ("species".into(), "photon,electron,positron".into()),
        ("ordering".into(), "species, energy level, active voxel, direction (direction fastest)".into()),
        ("shape".into(), join(&[3, ly.n_e, ly.n_vox, ly.n_dir])),
        (
            "active_voxels".into(),
            join(&(0..ly.n_vox).map(|a| space.spatial.grid_index(a)).collect::<Vec<_>>()),
        ),
    ];
    meta.extend(grid_meta(space));
    write_raw_f64(path, &field.data, &meta)
}

pub fn write_boundary_field(path: &Path, space: &PhaseSpace, field: &BoundaryField, quantity: &str) -> Result<()> {
    let mut meta = vec![
        ("quantity".to_string(), quantity.to_string()),
        ("species".into(), "photon,electron,positron".into()),
        ("ordering".into(), "species, energy level, boundary face, direction (direction fastest)".into()),
        ("shape".into(), join(&[3, field.n_e, field.n_faces, field.n_dir])),
    ];
    meta.extend(grid_meta(space));
    write_raw_f64(path, &field.data, &meta)
}

/// Comma-separated table with a header row.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Invalid(format!("writing {}: {e}", path.display()));
    w.write_record(header).map_err(err)?;
    for r in rows {
        if r.len() != header.len() {
            return Err(Error::Shape(format!("row of {} values under a {}-column header", r.len(), header.len())));
        }
        w.write_record(r.iter().map(|x| format!("{x:e}"))).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(format!("writing {}: {e}", path.display())))?;
    write_atomic(path, &bytes)
}

/// Two-column `name,value` table.
pub fn write_named_values(path: &Path, rows: &[(&str, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Invalid(format!("writing {}: {e}", path.display()));
    w.write_record(["name", "value"]).map_err(err)?;
    for (n, v) in rows {
        w.write_record([n.to_string(), format!("{v:e}")]).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(format!("writing {}: {e}", path.display())))?;
    write_atomic(path, &bytes)
}

/// Numeric rows of a comma-separated file; `#` lines are comments and a non-numeric
/// first row is taken as a header.
pub fn read_table(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Parse {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        let vals: std::result::Result<Vec<f64>, _> = rec.iter().map(|f| f.parse::<f64>()).collect();
        match vals {
            Ok(v) => rows.push(v),
            Err(_) if i == 0 => continue,
            Err(e) => {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    msg: format!("row {}: {e}", i + 1),
                })
            }
        }
    }
    Ok(rows)
}

/// Material table with columns E′, E, σ̂₀, σ̂₁, σ̂₂.
pub fn read_cross_section_table(path: &Path) -> Result<TabulatedCrossSection> {
    let rows = read_table(path)?;
    let mut out = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        let row: [f64; 5] = r.as_slice().try_into().map_err(|_| Error::Parse {
            path: path.display().to_string(),
            msg: format!("row {} has {} columns, expected 5", i + 1, r.len()),
        })?;
        out.push(row);
    }
    TabulatedCrossSection::from_rows(&out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.f64");
        let data = vec![1.5, -0.0, f64::MAX, 1e-300];
        write_raw_f64(&p, &data, &[("quantity".into(), "test".into())]).unwrap();
        let (back, meta) = read_raw_f64(&p).unwrap();
        assert_eq!(back, data);
        assert!(meta.contains(&("quantity".into(), "test".into())));
        assert_eq!(fs::read(&p).unwrap()[..8], 1.5f64.to_le_bytes());
    }

    #[test]
    fn labels_round_trip_and_size_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.u8");
        let l = vec![RegionLabel::Outside, RegionLabel::Target, RegionLabel::Critical, RegionLabel::Normal];
        write_labels(&p, &l).unwrap();
        assert_eq!(read_labels(&p, [2, 2, 1]).unwrap(), l);
        assert!(read_labels(&p, [2, 2, 2]).is_err());
        fs::write(&p, [0u8, 9, 1, 1]).unwrap();
        assert!(read_labels(&p, [4, 1, 1]).is_err());
    }

    #[test]
    fn tables_and_material_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        write_table(&p, &["kappa", "discrepancy"], &[vec![2.0, 0.5], vec![1.5, 0.25]]).unwrap();
        assert_eq!(read_table(&p).unwrap(), vec![vec![2.0, 0.5], vec![1.5, 0.25]]);
        assert!(write_table(&p, &["a"], &[vec![1.0, 2.0]]).is_err());

        let m = dir.path().join("mat.csv");
        let mut s = String::from("# E', E, s0, s1, s2\n");
        for ep in [2.0, 3.0] {
            for e in [1.5, 2.5] {
                s.push_str(&format!("{ep}, {e}, 1, 2, 3\n"));
            }
        }
        fs::write(&m, s).unwrap();
        let t = read_cross_section_table(&m).unwrap();
        assert_eq!(t.eval(1, 2.5, 2.0), 2.0);
        fs::write(&m, "2,1.5,1,2\n").unwrap();
        assert!(read_cross_section_table(&m).is_err());
    }
}
