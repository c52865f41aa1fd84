//! Raster I/O and resampling.
//!
//! Native array format: a raw little-endian data file plus a JSON sidecar
//! with the same stem:
//!
//! ```text
//! x.bin   raw values, row-major
//! x.json  {"shape": [..], "dtype": "f32le"}
//! ```
//!
//! A native tile is `<id>.bin` holding the `[C, H, W]` image as `f32le`
//! followed by the `[H, W]` mask as `i8`, described by `<id>.json`.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayD, ArrayViewD, IxDyn};
use serde::{Deserialize, Serialize};
use tiff::decoder::{Decoder, DecodingResult, Limits};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayHeader {
    pub shape: Vec<usize>,
    pub dtype: String,
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes `path` (raw `f32le`) and its `.json` sidecar.
pub fn write_array(path: &Path, array: ArrayViewD<f32>) -> Result<()> {
    let mut bytes = Vec::with_capacity(array.len() * 4);
    for v in array.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    write_json(
        &sidecar(path),
        &ArrayHeader {
            shape: array.shape().to_vec(),
            dtype: "f32le".into(),
        },
    )
}

pub fn read_array(path: &Path) -> Result<ArrayD<f32>> {
    let header: ArrayHeader = read_json(&sidecar(path))?;
    if header.dtype != "f32le" {
        return Err(Error::format(path, format!("unsupported dtype {}", header.dtype)));
    }
    let bytes = read_bytes(path)?;
    let n: usize = header.shape.iter().product();
    if bytes.len() != 4 * n {
        return Err(Error::format(path, format!("expected {} bytes, found {}", 4 * n, bytes.len())));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(ArrayD::from_shape_vec(IxDyn(&header.shape), values).unwrap())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TileHeader {
    id: String,
    /// `[C, H, W]`.
    shape: [usize; 3],
    data: String,
    image_dtype: String,
    mask_dtype: String,
}

/// Writes `<dir>/<id>.bin` and `<dir>/<id>.json`; returns the sidecar path.
pub fn write_native_tile(dir: &Path, id: &str, image: &Array3<f32>, mask: &Array2<i64>) -> Result<PathBuf> {
    let (c, h, w) = image.dim();
    if mask.dim() != (h, w) {
        return Err(Error::Data(format!("{id}: mask shape {:?} vs image {h}x{w}", mask.dim())));
    }
    let data = format!("{id}.bin");
    let mut bytes = Vec::with_capacity(c * h * w * 4 + h * w);
    for v in image.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for &v in mask.iter() {
        let b = i8::try_from(v).map_err(|_| Error::Data(format!("{id}: mask value {v} does not fit i8")))?;
        bytes.push(b as u8);
    }
    let bin = dir.join(&data);
    fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    let json = dir.join(format!("{id}.json"));
    write_json(
        &json,
        &TileHeader {
            id: id.to_string(),
            shape: [c, h, w],
            data,
            image_dtype: "f32le".into(),
            mask_dtype: "i8".into(),
        },
    )?;
    Ok(json)
}

/// Reads a native tile from its sidecar.
pub fn read_native_tile(json: &Path) -> Result<(Array3<f32>, Array2<i64>)> {
    let header: TileHeader = read_json(json)?;
    if header.image_dtype != "f32le" || header.mask_dtype != "i8" {
        return Err(Error::format(json, "unsupported tile dtypes"));
    }
    let bin = json.parent().unwrap_or(Path::new(".")).join(&header.data);
    let bytes = read_bytes(&bin)?;
    let [c, h, w] = header.shape;
    let img_len = c * h * w * 4;
    if bytes.len() != img_len + h * w {
        return Err(Error::format(&bin, format!("expected {} bytes, found {}", img_len + h * w, bytes.len())));
    }
    let image = bytes[..img_len]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let mask = bytes[img_len..].iter().map(|&b| b as i8 as i64).collect();
    Ok((
        Array3::from_shape_vec((c, h, w), image).unwrap(),
        Array2::from_shape_vec((h, w), mask).unwrap(),
    ))
}

fn to_f32(result: DecodingResult) -> Vec<f32> {
    match result {
        DecodingResult::U8(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::U16(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::U32(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::U64(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::F16(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::F32(v) => v,
        DecodingResult::F64(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::I8(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::I16(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::I32(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::I64(v) => v.into_iter().map(|x| x as f32).collect(),
    }
}

/// Reads every band of the first image of a (Geo)TIFF as `[bands, H, W]`.
/// Both pixel-interleaved and band-sequential layouts are accepted.
pub fn read_geotiff(path: &Path) -> Result<Array3<f32>> {
    let fmt = |e: tiff::TiffError| Error::format(path, e.to_string());
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = Decoder::new(BufReader::new(file)).map_err(fmt)?.with_limits(Limits::unlimited());
    let (w, h) = dec.dimensions().map_err(fmt)?;
    let (w, h) = (w as usize, h as usize);
    let samples = dec.colortype().map_err(fmt)?.num_samples() as usize;
    let mut result = DecodingResult::U8(Vec::new());
    let layout = dec.read_image_to_buffer(&mut result).map_err(fmt)?;
    let values = to_f32(result);
    if layout.planes > 1 {
        let bands = layout.planes;
        if values.len() < bands * h * w {
            return Err(Error::format(path, "planar image data truncated"));
        }
        Ok(Array3::from_shape_vec((bands, h, w), values[..bands * h * w].to_vec()).unwrap())
    } else {
        if values.len() < samples * h * w {
            return Err(Error::format(path, "image data truncated"));
        }
        let hwc = Array3::from_shape_vec((h, w, samples), values[..samples * h * w].to_vec()).unwrap();
        Ok(hwc.permuted_axes([2, 0, 1]).as_standard_layout().to_owned())
    }
}

/// Bilinear resize of `[C, H, W]` with half-pixel centres.
pub fn resize_bilinear(image: &Array3<f32>, (oh, ow): (usize, usize)) -> Array3<f32> {
    let (c, h, w) = image.dim();
    if (h, w) == (oh, ow) {
        return image.clone();
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let ty = taps(oh, h);
    let tx = taps(ow, w);
    Array3::from_shape_fn((c, oh, ow), |(k, i, j)| {
        let (y0, y1, fy) = ty[i];
        let (x0, x1, fx) = tx[j];
        let top = image[[k, y0, x0]] * (1.0 - fx) + image[[k, y0, x1]] * fx;
        let bot = image[[k, y1, x0]] * (1.0 - fx) + image[[k, y1, x1]] * fx;
        top * (1.0 - fy) + bot * fy
    })
}

/// Nearest-neighbour resize of a label map; output values are a subset of
/// the input values.
pub fn resize_nearest(mask: &Array2<i64>, (oh, ow): (usize, usize)) -> Array2<i64> {
    let (h, w) = mask.dim();
    if (h, w) == (oh, ow) {
        return mask.clone();
    }
    let pick = |o: usize, out: usize, inp: usize| (((o as f64 + 0.5) * inp as f64 / out as f64) as usize).min(inp - 1);
    Array2::from_shape_fn((oh, ow), |(i, j)| mask[[pick(i, oh, h), pick(j, ow, w)]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use tiff::encoder::{colortype, TiffEncoder};

    #[test]
    fn native_tile_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Array3::from_shape_fn((3, 4, 5), |(c, i, j)| (c * 20 + i * 5 + j) as f32 * 0.5 - 3.0);
        let mask = Array2::from_shape_fn((4, 5), |(i, j)| ((i + j) % 3) as i64 - 1);
        let json = write_native_tile(dir.path(), "t0", &img, &mask).unwrap();
        let (i2, m2) = read_native_tile(&json).unwrap();
        assert_eq!(i2, img);
        assert_eq!(m2, mask);
    }

    #[test]
    fn array_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = ArrayD::from_shape_fn(IxDyn(&[2, 3, 4]), |i| (i[0] + i[1] * i[2]) as f32);
        let p = dir.path().join("a.bin");
        write_array(&p, a.view()).unwrap();
        assert_eq!(read_array(&p).unwrap(), a);
    }

    #[test]
    fn geotiff_bands_are_deinterleaved() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rgb.tif");
        let (w, h) = (4u32, 3u32);
        let data: Vec<f32> = (0..(w * h * 3)).map(|v| v as f32).collect();
        {
            let file = fs::File::create(&path).unwrap();
            let mut enc = TiffEncoder::new(file).unwrap();
            enc.write_image::<colortype::RGB32Float>(w, h, &data).unwrap();
        }
        let img = read_geotiff(&path).unwrap();
        assert_eq!(img.dim(), (3, 3, 4));
        // pixel (1, 2), band 2 sits at interleaved offset (1*4 + 2)*3 + 2
        assert_eq!(img[[2, 1, 2]], 20.0);

        let gray = dir.path().join("mask.tif");
        {
            let file = fs::File::create(&gray).unwrap();
            let mut enc = TiffEncoder::new(file).unwrap();
            enc.write_image::<colortype::GrayI16>(2, 2, &[-1i16, 0, 1, 1]).unwrap();
        }
        let m = read_geotiff(&gray).unwrap();
        assert_eq!(m.iter().copied().collect::<Vec<_>>(), vec![-1.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn resizing() {
        let img = Array3::from_elem((2, 3, 3), 4.5f32);
        assert!(resize_bilinear(&img, (7, 5)).iter().all(|&v| (v - 4.5).abs() < 1e-6));
        let ramp = Array3::from_shape_fn((1, 2, 2), |(_, i, j)| (i * 2 + j) as f32);
        assert_eq!(resize_bilinear(&ramp, (2, 2)), ramp);
        let mask = Array2::from_shape_fn((5, 5), |(i, j)| ((i * 5 + j) % 3) as i64 - 1);
        let up = resize_nearest(&mask, (8, 9));
        assert_eq!(up.dim(), (8, 9));
        assert!(up.iter().all(|v| [-1, 0, 1].contains(v)));
        assert_eq!(resize_nearest(&mask, (5, 5)), mask);
    }
}
