//! `.mvol` volume files: a JSON header plus a raw little-endian payload in
//! x-fastest order. Scalars are stored as `f32`, labels as `i16`.
//!
//! ```json
//! {"dims":[nx,ny,nz],"spacing":[sx,sy,sz],"origin":[ox,oy,oz],"dtype":"f32","data":"name.raw"}
//! ```
//!
//! Writes go through a temporary file and a rename so readers never see a
//! partially written file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ddf::DisplacementField;
use crate::error::{Error, Result};
use crate::volume::{Grid, LabelMap, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    I16,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::I16 => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MvolHeader {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub dtype: String,
    /// Raw payload path relative to the header's directory.
    pub data: String,
    /// Label set of a label volume, when it holds labels absent from the data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_set: Option<Vec<i16>>,
}

/// Either kind of volume read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyVolume {
    Scalar(Volume),
    Labels(LabelMap),
}

/// Writes `bytes` to `path` via a sibling temp file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn raw_path_for(header_path: &Path) -> (PathBuf, String) {
    let stem = header_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "volume".into());
    let name = format!("{stem}.raw");
    (header_path.with_file_name(&name), name)
}

fn write_with_payload(path: &Path, grid: &Grid, dtype: Dtype, payload: &[u8], label_set: Option<Vec<i16>>) -> Result<()> {
    let (raw_path, raw_name) = raw_path_for(path);
    let header = MvolHeader {
        dims: grid.dims,
        spacing: grid.spacing,
        origin: grid.origin,
        dtype: match dtype {
            Dtype::F32 => "f32".into(),
            Dtype::I16 => "i16".into(),
        },
        data: raw_name,
        label_set,
    };
    write_atomic(&raw_path, payload)?;
    let mut text = serde_json::to_vec_pretty(&header)?;
    text.push(b'\n');
    write_atomic(path, &text)
}

pub fn write_volume(path: &Path, vol: &Volume) -> Result<()> {
    let mut payload = Vec::with_capacity(vol.data.len() * 4);
    for &v in &vol.data {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_with_payload(path, &vol.grid, Dtype::F32, &payload, None)
}

pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    let mut payload = Vec::with_capacity(labels.labels.len() * 2);
    for &l in &labels.labels {
        payload.extend_from_slice(&l.to_le_bytes());
    }
    let present = LabelMap::new(labels.grid, labels.labels.clone())?.label_set;
    let label_set = (present != labels.label_set).then(|| labels.label_set.clone());
    write_with_payload(path, &labels.grid, Dtype::I16, &payload, label_set)
}

pub fn read_header(path: &Path) -> Result<MvolHeader> {
    let text = fs::read(path)?;
    let header: MvolHeader = serde_json::from_slice(&text).map_err(|e| Error::InvalidHeader {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let bad = |reason: String| Error::InvalidHeader { path: path.to_path_buf(), reason };
    if header.dims.iter().any(|&n| n == 0) {
        return Err(bad(format!("dims must be positive, got {:?}", header.dims)));
    }
    if header.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(bad(format!("spacing must be positive, got {:?}", header.spacing)));
    }
    if header.origin.iter().any(|o| !o.is_finite()) {
        return Err(bad("origin must be finite".into()));
    }
    Ok(header)
}

fn parse_dtype(s: &str) -> Result<Dtype> {
    match s {
        "f32" => Ok(Dtype::F32),
        "i16" => Ok(Dtype::I16),
        other => Err(Error::UnsupportedDtype(other.into())),
    }
}

pub fn read_any(path: &Path) -> Result<AnyVolume> {
    let header = read_header(path)?;
    let dtype = parse_dtype(&header.dtype)?;
    let raw_path = path.parent().unwrap_or_else(|| Path::new(".")).join(&header.data);
    let bytes = fs::read(&raw_path)?;
    let grid = Grid::new(header.dims, header.spacing, header.origin)?;
    let n = grid.len();
    if bytes.len() % dtype.width() != 0 || bytes.len() / dtype.width() != n {
        return Err(Error::DataLength { expected: n, found: bytes.len() / dtype.width() });
    }
    match dtype {
        Dtype::F32 => {
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            Ok(AnyVolume::Scalar(Volume::new(grid, data)?))
        }
        Dtype::I16 => {
            let labels: Vec<i16> = bytes.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect();
            let map = match header.label_set {
                Some(set) => LabelMap::with_label_set(grid, labels, set)?,
                None => LabelMap::new(grid, labels)?,
            };
            Ok(AnyVolume::Labels(map))
        }
    }
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    match read_any(path)? {
        AnyVolume::Scalar(v) => Ok(v),
        AnyVolume::Labels(_) => Err(Error::UnsupportedDtype(format!(
            "{}: expected f32 scalar volume, found i16 labels",
            path.display()
        ))),
    }
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    match read_any(path)? {
        AnyVolume::Labels(l) => Ok(l),
        AnyVolume::Scalar(_) => Err(Error::UnsupportedDtype(format!(
            "{}: expected i16 label volume, found f32 scalars",
            path.display()
        ))),
    }
}

/// Header of a displacement field: three scalar `.mvol` files, one per axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DdfHeader {
    pub components: [String; 3],
}

/// Writes `<stem>.ddf.json` plus `<stem>_x.mvol`, `<stem>_y.mvol`, `<stem>_z.mvol`.
pub fn write_ddf(path: &Path, ddf: &DisplacementField) -> Result<()> {
    let name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let stem = name.strip_suffix(".ddf.json").unwrap_or(&name).to_string();
    let mut components: [String; 3] = Default::default();
    for (a, axis) in ["x", "y", "z"].iter().enumerate() {
        let comp_name = format!("{stem}_{axis}.mvol");
        let vol = Volume { grid: ddf.grid, data: ddf.components[a].clone() };
        write_volume(&path.with_file_name(&comp_name), &vol)?;
        components[a] = comp_name;
    }
    let mut text = serde_json::to_vec_pretty(&DdfHeader { components })?;
    text.push(b'\n');
    write_atomic(path, &text)
}

pub fn read_ddf(path: &Path) -> Result<DisplacementField> {
    let header: DdfHeader = serde_json::from_slice(&fs::read(path)?).map_err(|e| Error::InvalidHeader {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let comps: Vec<Volume> = header
        .components
        .iter()
        .map(|c| read_volume(&dir.join(c)))
        .collect::<Result<_>>()?;
    let grid = comps[0].grid;
    for c in &comps[1..] {
        crate::error::check_dims(grid.dims, c.grid.dims)?;
    }
    let [x, y, z]: [Volume; 3] = comps.try_into().expect("three components");
    DisplacementField::from_components(grid, [x.data, y.data, z.data])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_volume() -> Volume {
        let g = Grid::new([3, 4, 2], [1.0, 0.5, 2.0], [-1.0, 0.0, 3.5]).unwrap();
        Volume::from_fn(g, |x, y, z| (x as f32 * 0.3 - y as f32 * 1.7 + z as f32) as f64)
    }

    #[test]
    fn scalar_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.mvol");
        let v = sample_volume();
        write_volume(&p, &v).unwrap();
        assert_eq!(read_volume(&p).unwrap(), v);
        let raw1 = fs::read(dir.path().join("img.raw")).unwrap();
        write_volume(&p, &read_volume(&p).unwrap()).unwrap();
        assert_eq!(fs::read(dir.path().join("img.raw")).unwrap(), raw1);
    }

    #[test]
    fn label_round_trip_keeps_label_set() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lab.mvol");
        let g = Grid::unit([2, 2, 1]);
        let l = LabelMap::with_label_set(g, vec![0, 1, 1, -3], vec![-3, 0, 1, 7]).unwrap();
        write_labels(&p, &l).unwrap();
        assert_eq!(read_labels(&p).unwrap(), l);
    }

    #[test]
    fn short_payload_is_a_length_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.mvol");
        fs::write(dir.path().join("bad.raw"), vec![0u8; 7 * 4]).unwrap();
        fs::write(&p, r#"{"dims":[2,2,2],"spacing":[1,1,1],"origin":[0,0,0],"dtype":"f32","data":"bad.raw"}"#).unwrap();
        assert!(matches!(read_any(&p), Err(Error::DataLength { expected: 8, found: 7 })));
    }

    #[test]
    fn zero_spacing_is_an_invalid_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.mvol");
        fs::write(dir.path().join("bad.raw"), vec![0u8; 8 * 4]).unwrap();
        fs::write(&p, r#"{"dims":[2,2,2],"spacing":[1,0,1],"origin":[0,0,0],"dtype":"f32","data":"bad.raw"}"#).unwrap();
        assert!(matches!(read_any(&p), Err(Error::InvalidHeader { .. })));
    }

    #[test]
    fn unknown_dtype_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.mvol");
        fs::write(dir.path().join("bad.raw"), vec![0u8; 8]).unwrap();
        fs::write(&p, r#"{"dims":[1,1,1],"spacing":[1,1,1],"origin":[0,0,0],"dtype":"f64","data":"bad.raw"}"#).unwrap();
        assert!(matches!(read_any(&p), Err(Error::UnsupportedDtype(_))));
    }

    #[test]
    fn ddf_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u.ddf.json");
        let g = Grid::unit([3, 2, 2]);
        let n = g.len();
        let f = DisplacementField::from_components(
            g,
            [vec![0.5; n], (0..n).map(|i| i as f64 * 0.25).collect(), vec![-1.0; n]],
        )
        .unwrap();
        write_ddf(&p, &f).unwrap();
        assert_eq!(read_ddf(&p).unwrap(), f);
        assert!(dir.path().join("u_y.mvol").exists());
    }
}
