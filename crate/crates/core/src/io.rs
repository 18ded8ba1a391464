//! `.vst` tensor containers and PNG export.
//!
//! A `.vst` tensor is a pair of files: `<name>.vst` holds the raw values in C
//! order (little-endian `f32`, or `u8` for label volumes) and
//! `<name>.vst.json` holds the header with shape, dtype, spacing and class map.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayView2, ArrayViewD, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Class, LabelMask, Volume, FOREGROUND};
use crate::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VstHeader {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub order: String,
    pub endianness: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orientation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_map: Option<BTreeMap<String, String>>,
}

impl VstHeader {
    pub fn new(shape: &[usize], dtype: &str) -> Self {
        Self {
            shape: shape.to_vec(),
            dtype: dtype.to_string(),
            order: "C".into(),
            endianness: "little".into(),
            spacing: None,
            origin: None,
            orientation: None,
            class_map: None,
        }
    }
}

pub fn class_map() -> BTreeMap<String, String> {
    std::iter::once(Class::Background)
        .chain(FOREGROUND)
        .map(|c| ((c as u8).to_string(), c.name().to_string()))
        .collect()
}

pub fn header_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    f.write_all(bytes).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

fn write_header(path: &Path, header: &VstHeader) -> Result<()> {
    let json = serde_json::to_vec_pretty(header).map_err(|e| Error::Format(e.to_string()))?;
    write_bytes(&header_path(path), &json)
}

pub fn read_header(path: &Path) -> Result<VstHeader> {
    let hp = header_path(path);
    let bytes = std::fs::read(&hp).map_err(|e| Error::io(&hp, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", hp.display())))
}

/// Writes a float tensor; values are stored as `f32` whatever `T` is.
pub fn write_f32<T: Real>(path: &Path, values: ArrayViewD<'_, T>, mut header: VstHeader) -> Result<()> {
    header.shape = values.shape().to_vec();
    header.dtype = "f32".into();
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values.iter() {
        bytes.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
    }
    write_bytes(path, &bytes)?;
    write_header(path, &header)
}

pub fn read_f32<T: Real>(path: &Path) -> Result<(VstHeader, ArrayD<T>)> {
    let header = read_header(path)?;
    if header.dtype != "f32" {
        return Err(Error::Format(format!("{}: dtype {} is not f32", path.display(), header.dtype)));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let n: usize = header.shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::Format(format!(
            "{}: {} bytes for {n} f32 values",
            path.display(),
            bytes.len()
        )));
    }
    let data: Vec<T> = bytes
        .chunks_exact(4)
        .map(|c| T::cast(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    let arr = ArrayD::from_shape_vec(IxDyn(&header.shape), data)
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok((header, arr))
}

pub fn write_u8(path: &Path, values: ArrayViewD<'_, u8>, mut header: VstHeader) -> Result<()> {
    header.shape = values.shape().to_vec();
    header.dtype = "u8".into();
    let bytes: Vec<u8> = values.iter().copied().collect();
    write_bytes(path, &bytes)?;
    write_header(path, &header)
}

pub fn read_u8(path: &Path) -> Result<(VstHeader, ArrayD<u8>)> {
    let header = read_header(path)?;
    if header.dtype != "u8" {
        return Err(Error::Format(format!("{}: dtype {} is not u8", path.display(), header.dtype)));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let arr = ArrayD::from_shape_vec(IxDyn(&header.shape), bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok((header, arr))
}

fn labels_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.labels.vst"))
}

/// Saves `vol` as `<path>` (+ header) and, if labelled, `<stem>.labels.vst`.
pub fn save_volume<T: Real>(vol: &Volume<T>, path: &Path) -> Result<()> {
    let mut h = VstHeader::new(&[], "f32");
    h.spacing = Some(vol.spacing.to_vec());
    h.origin = Some(vol.origin);
    h.orientation = Some(vol.orientation.clone());
    write_f32(path, vol.data.view().into_dyn(), h.clone())?;
    if let Some(labels) = &vol.labels {
        h.class_map = Some(class_map());
        write_u8(&labels_path(path), labels.view().into_dyn(), h)?;
    }
    Ok(())
}

pub fn load_volume<T: Real>(path: &Path) -> Result<Volume<T>> {
    let (h, data) = read_f32::<T>(path)?;
    let data: Array3<T> = data
        .into_dimensionality()
        .map_err(|_| Error::Format(format!("{}: not a 3D tensor", path.display())))?;
    let lp = labels_path(path);
    let labels = if header_path(&lp).exists() {
        let (_, l) = read_u8(&lp)?;
        Some(
            l.into_dimensionality()
                .map_err(|_| Error::Format(format!("{}: not a 3D tensor", lp.display())))?,
        )
    } else {
        None
    };
    let spacing = match h.spacing.as_deref() {
        Some([a, b, c]) => [*a, *b, *c],
        _ => return Err(Error::Format(format!("{}: missing 3-element spacing", path.display()))),
    };
    let mut vol = Volume::new(data, labels, spacing)?;
    vol.origin = h.origin.unwrap_or(0.0);
    if let Some(o) = h.orientation {
        vol.orientation = o;
    }
    Ok(vol)
}

fn encode_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    palette: Option<Vec<u8>>,
    data: &[u8],
) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    if let Some(p) = palette {
        enc.set_palette(p);
    }
    let mut w = enc
        .write_header()
        .map_err(|e| Error::Format(format!("png header: {e}")))?;
    w.write_image_data(data)
        .map_err(|e| Error::Format(format!("png data: {e}")))
}

/// Maps `[lo, hi]` linearly onto `0..=255`.
pub fn to_gray_u8<T: Real>(img: ArrayView2<'_, T>, lo: f64, hi: f64) -> Array2<u8> {
    img.mapv(|v| {
        let u = (v.to_f64_lossy() - lo) / (hi - lo);
        (u.clamp(0.0, 1.0) * 255.0).round() as u8
    })
}

pub fn write_png_gray<T: Real>(path: &Path, img: ArrayView2<'_, T>) -> Result<()> {
    let g = to_gray_u8(img, -1.0, 1.0);
    let (h, w) = g.dim();
    let data: Vec<u8> = g.iter().copied().collect();
    encode_png(path, w, h, png::ColorType::Grayscale, None, &data)
}

/// Indexed PNG whose palette entry `k` is the colour of class `k`.
pub fn write_png_mask(path: &Path, mask: &LabelMask) -> Result<()> {
    let (h, w) = mask.dim();
    let palette: Vec<u8> = std::iter::once(Class::Background)
        .chain(FOREGROUND)
        .flat_map(|c| c.color())
        .collect();
    let data: Vec<u8> = mask.as_array().iter().copied().collect();
    encode_png(path, w, h, png::ColorType::Indexed, Some(palette), &data)
}

/// `rgb` is `[rows, cols, 3]`.
pub fn write_png_rgb(path: &Path, rgb: &Array3<u8>) -> Result<()> {
    let (h, w, c) = rgb.dim();
    if c != 3 {
        return Err(Error::Contract(format!("rgb image needs 3 channels, got {c}")));
    }
    let data: Vec<u8> = rgb.iter().copied().collect();
    encode_png(path, w, h, png::ColorType::Rgb, None, &data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> PathBuf {
        let d = std::env::temp_dir().join(format!("dmcvr-io-{}-{name}", std::process::id()));
        std::fs::create_dir_all(&d).unwrap();
        d
    }

    #[test]
    fn volume_pair_round_trip() {
        let dir = tmp("vol");
        let data = Array3::from_shape_fn((3, 4, 5), |(z, y, x)| (z as f32 - y as f32 * 0.5 + x as f32) / 10.0);
        let labels = Array3::from_shape_fn((3, 4, 5), |(z, y, x)| ((z + y + x) % 4) as u8);
        let mut vol = Volume::new(data, Some(labels), [1.5, 1.5, 8.0]).unwrap();
        vol.origin = 16.0;
        let p = dir.join("case.vst");
        save_volume(&vol, &p).unwrap();
        assert!(dir.join("case.vst.json").exists());
        assert!(dir.join("case.labels.vst").exists());
        let back: Volume<f32> = load_volume(&p).unwrap();
        assert_eq!(back, vol);

        let raw = std::fs::read(&p).unwrap();
        assert_eq!(raw.len(), 3 * 4 * 5 * 4);
        assert_eq!(&raw[4..8], &vol.data[[0, 0, 1]].to_le_bytes());
        let h = read_header(&dir.join("case.labels.vst")).unwrap();
        assert_eq!(h.dtype, "u8");
        assert_eq!(h.class_map.unwrap()["2"], "LVM");
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn png_writers_produce_files() {
        let dir = tmp("png");
        let img = Array2::from_shape_fn((8, 6), |(y, x)| (y as f64 - x as f64) / 8.0);
        write_png_gray(&dir.join("g.png"), img.view()).unwrap();
        let m = LabelMask::new(Array2::from_shape_fn((8, 6), |(y, _)| (y % 4) as u8)).unwrap();
        write_png_mask(&dir.join("m.png"), &m).unwrap();
        let decoder = png::Decoder::new(std::io::BufReader::new(File::open(dir.join("m.png")).unwrap()));
        let reader = decoder.read_info().unwrap();
        let info = reader.info();
        assert_eq!(info.color_type, png::ColorType::Indexed);
        assert_eq!(&info.palette.as_ref().unwrap()[3..6], &[255, 0, 0]);
        std::fs::remove_dir_all(dir).ok();
    }
}
