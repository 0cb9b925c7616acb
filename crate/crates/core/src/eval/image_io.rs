//! PPM (P6) and PNG reading and writing with the `[−1, 1] ↔ 0..=255` map.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// `clamp(round((v + 1)·127.5), 0, 255)`.
pub fn to_byte<T: Real>(v: T) -> u8 {
    let x = ((v.to_f64_lossy() + 1.0) * 127.5).round();
    if x.is_nan() {
        0
    } else {
        x.clamp(0.0, 255.0) as u8
    }
}

pub fn from_byte(b: u8) -> f64 {
    f64::from(b) / 127.5 - 1.0
}

fn check_image(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [3, h, w] if h * w > 0 => Ok((*h, *w)),
        _ => Err(Error::shape(format!(
            "expected a non-empty [3, H, W] image, got {shape:?}"
        ))),
    }
}

/// Interleaved row-major RGB bytes.
fn interleave<T: Real>(image: &Tensor<T>) -> Result<(usize, usize, Vec<u8>)> {
    let (h, w) = check_image(image.shape())?;
    let d = image.data();
    let p = h * w;
    let mut out = Vec::with_capacity(3 * p);
    for i in 0..p {
        for c in 0..3 {
            out.push(to_byte(d[c * p + i]));
        }
    }
    Ok((h, w, out))
}

fn planar(h: usize, w: usize, rgb: &[u8], maxval: u32) -> Tensor<f64> {
    let p = h * w;
    Tensor::from_fn(vec![3, h, w], |i| {
        let b = rgb[(i % p) * 3 + i / p];
        if maxval == 255 {
            from_byte(b)
        } else {
            f64::from(b) / f64::from(maxval) * 2.0 - 1.0
        }
    })
}

pub fn encode_ppm<T: Real>(image: &Tensor<T>) -> Result<Vec<u8>> {
    let (h, w, rgb) = interleave(image)?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&rgb);
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f64>> {
    let mut at = 0;
    let mut fields = [0u32; 3];
    if bytes.get(..2) != Some(b"P6") {
        return Err(Error::Format {
            offset: 0,
            reason: "not a binary PPM (expected `P6`)".into(),
        });
    }
    at += 2;
    for (i, field) in fields.iter_mut().enumerate() {
        loop {
            match bytes.get(at) {
                Some(b'#') => {
                    while bytes.get(at).is_some_and(|&b| b != b'\n') {
                        at += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => at += 1,
                _ => break,
            }
        }
        let start = at;
        while bytes.get(at).is_some_and(u8::is_ascii_digit) {
            at += 1;
        }
        let text = std::str::from_utf8(&bytes[start..at]).unwrap_or("");
        *field = text.parse().map_err(|_| Error::Format {
            offset: start,
            reason: format!(
                "expected {} in PPM header",
                ["width", "height", "maxval"][i]
            ),
        })?;
    }
    if !bytes.get(at).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format {
            offset: at,
            reason: "missing whitespace after maxval".into(),
        });
    }
    at += 1;
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 || maxval == 0 || maxval > 255 {
        return Err(Error::Format {
            offset: at,
            reason: format!("unsupported PPM geometry {w}×{h}, maxval {maxval}"),
        });
    }
    let (w, h) = (w as usize, h as usize);
    let payload = &bytes[at..];
    if payload.len() < 3 * w * h {
        return Err(Error::Format {
            offset: bytes.len(),
            reason: format!("PPM payload holds {} of {} bytes", payload.len(), 3 * w * h),
        });
    }
    Ok(planar(h, w, &payload[..3 * w * h], maxval))
}

pub fn write_image<T: Real>(image: &Tensor<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_ppm(image)?)?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<Tensor<f64>> {
    decode_ppm(&std::fs::read(path)?)
}

pub fn encode_png<T: Real>(image: &Tensor<T>) -> Result<Vec<u8>> {
    let (h, w, rgb) = interleave(image)?;
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Format {
        offset: 0,
        reason: e.to_string(),
    })?;
    writer.write_image_data(&rgb).map_err(|e| Error::Format {
        offset: 0,
        reason: e.to_string(),
    })?;
    writer.finish().map_err(|e| Error::Format {
        offset: 0,
        reason: e.to_string(),
    })?;
    Ok(out)
}

pub fn decode_png(bytes: &[u8]) -> Result<Tensor<f64>> {
    let fail = |e: png::DecodingError| Error::Format {
        offset: 0,
        reason: e.to_string(),
    };
    let mut dec = png::Decoder::new(std::io::Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(fail)?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(fail)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let buf = &buf[..info.buffer_size()];
    let channels = info.color_type.samples();
    let rgb: Vec<u8> = buf
        .chunks_exact(channels)
        .flat_map(|px| match channels {
            1 | 2 => [px[0]; 3],
            _ => [px[0], px[1], px[2]],
        })
        .collect();
    Ok(planar(h, w, &rgb, 255))
}

/// Decodes PPM or PNG by content.
pub fn decode_any(bytes: &[u8]) -> Result<Tensor<f64>> {
    if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        decode_png(bytes)
    } else {
        Err(Error::Format {
            offset: 0,
            reason: "neither a P6 PPM nor a PNG".into(),
        })
    }
}

/// Largest centered square, then nearest-neighbour resize to `r × r`.
pub fn crop_and_resize(image: &Tensor<f64>, r: usize) -> Result<Tensor<f64>> {
    let (h, w) = check_image(image.shape())?;
    let s = h.min(w);
    let (y0, x0) = ((h - s) / 2, (w - s) / 2);
    let d = image.data();
    Ok(Tensor::from_fn(vec![3, r, r], |i| {
        let (c, y, x) = (i / (r * r), (i / r) % r, i % r);
        let (sy, sx) = (y0 + y * s / r, x0 + x * s / r);
        d[(c * h + sy) * w + sx]
    }))
}

/// Every regular file in `dir`, in lexicographic name order. Any file that
/// does not decode is an error.
pub fn load_image_folder(dir: &Path, resolution: usize) -> Result<Vec<Tensor<f64>>> {
    let data_err = |path: &Path, reason: String| Error::Data {
        path: path.to_path_buf(),
        reason,
    };
    if resolution == 0 {
        return Err(Error::Usage("resolution must be positive".into()));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| data_err(dir, e.to_string()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| data_err(dir, e.to_string()))?
        .into_iter()
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(data_err(dir, "folder contains no images".into()));
    }
    files
        .iter()
        .map(|f| {
            let bytes = std::fs::read(f).map_err(|e| data_err(f, e.to_string()))?;
            let img = decode_any(&bytes).map_err(|e| data_err(f, e.to_string()))?;
            crop_and_resize(&img, resolution)
        })
        .collect()
}

/// Tiles equally sized `[3, R, R]` images into a grid with `cols` columns.
pub fn image_grid<T: Real>(images: &[Tensor<T>], cols: usize) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Usage("empty image grid".into()))?;
    let (h, w) = check_image(first.shape())?;
    let cols = cols.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let (gh, gw) = (rows * h, cols * w);
    let mut grid = Tensor::full(vec![3, gh, gw], -T::one());
    for (k, img) in images.iter().enumerate() {
        if img.shape() != first.shape() {
            return Err(Error::shape(format!(
                "grid images differ: {:?} vs {:?}",
                img.shape(),
                first.shape()
            )));
        }
        let (oy, ox) = ((k / cols) * h, (k % cols) * w);
        for c in 0..3 {
            for y in 0..h {
                let src = &img.data()[(c * h + y) * w..(c * h + y + 1) * w];
                let at = (c * gh + oy + y) * gw + ox;
                grid.data_mut()[at..at + w].copy_from_slice(src);
            }
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_mapping_endpoints() {
        assert_eq!(to_byte(-1.0), 0);
        assert_eq!(to_byte(1.0), 255);
        assert_eq!(to_byte(0.0), 128);
        assert_eq!(to_byte(7.0), 255);
        assert_eq!(to_byte(-3.0f32), 0);
    }

    #[test]
    fn known_two_by_two_payload() {
        // Pixels (row-major): red, green / blue, mid-grey.
        let img = Tensor::new(
            vec![3, 2, 2],
            vec![
                1.0, -1.0, -1.0, 0.0, -1.0, 1.0, -1.0, 0.0, -1.0, -1.0, 1.0, 0.0,
            ],
        )
        .unwrap();
        let bytes = encode_ppm(&img).unwrap();
        let header = b"P6\n2 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(
            &bytes[header.len()..],
            &[255, 0, 0, 0, 255, 0, 0, 0, 255, 128, 128, 128]
        );
    }

    #[test]
    fn ppm_round_trip_is_idempotent() {
        let img = Tensor::from_fn(vec![3, 3, 5], |i| ((i * 37) % 101) as f64 / 50.0 - 1.0);
        let once = encode_ppm(&img).unwrap();
        let back = decode_ppm(&once).unwrap();
        assert!(img.max_abs_diff(&back) <= 1.0 / 255.0 + 1e-12);
        assert_eq!(encode_ppm(&back).unwrap(), once);
    }

    #[test]
    fn png_round_trip_matches_ppm_mapping() {
        let img = Tensor::from_fn(vec![3, 4, 2], |i| (i as f64 / 12.0) - 1.0);
        let via_png = decode_png(&encode_png(&img).unwrap()).unwrap();
        let via_ppm = decode_ppm(&encode_ppm(&img).unwrap()).unwrap();
        assert_eq!(via_png, via_ppm);
    }

    #[test]
    fn header_comments_and_errors() {
        let mut bytes = b"P6 # made by hand\n1 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 128, 255]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!(img.data(), &[-1.0, from_byte(128), 1.0]);
        assert!(matches!(
            decode_ppm(b"P3\n1 1\n255\n"),
            Err(Error::Format { offset: 0, .. })
        ));
        assert!(matches!(
            decode_ppm(b"P6\nx 1\n255\n"),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            decode_ppm(b"P6\n2 2\n255\n\0\0"),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn crop_takes_centered_square() {
        let img = Tensor::from_fn(vec![3, 2, 4], |i| i as f64);
        let out = crop_and_resize(&img, 2).unwrap();
        assert_eq!(&out.data()[..4], &[1.0, 2.0, 5.0, 6.0]);
        let up = crop_and_resize(&out, 4).unwrap();
        assert_eq!(&up.data()[..4], &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn grid_places_tiles() {
        let a = Tensor::full(vec![3, 1, 1], 0.5);
        let b = Tensor::full(vec![3, 1, 1], -0.5);
        let g = image_grid(&[a.clone(), b, a], 2).unwrap();
        assert_eq!(g.shape(), &[3, 2, 2]);
        assert_eq!(&g.data()[..4], &[0.5, -0.5, 0.5, -1.0]);
    }
}
