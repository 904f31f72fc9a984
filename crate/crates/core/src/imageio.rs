//! Binary PGM (P5) and PPM (P6) encoding, decoding and overlays.

use crate::attention::Heatmap;
use crate::error::{Error, Result};
use crate::evaluation::BoundingBox;
use crate::tensor::Tensor;

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `P5\n<W> <H>\n255\n` followed by one byte per cell.
pub fn encode_pgm(h: &Heatmap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", h.cols(), h.rows()).into_bytes();
    out.extend(h.to_bytes());
    out
}

/// Encodes an `[h, w, 3]` image with values in `[0, 1]` as P6.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    if image.rank() != 3 || image.shape()[2] != 3 {
        return Err(Error::shape("encode_ppm", format!("expected [h, w, 3], got {:?}", image.shape())));
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

fn header_fields(bytes: &[u8], count: usize) -> Result<(Vec<String>, usize)> {
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::invalid("truncated image header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the raster.
    Ok((fields, i + 1))
}

/// Decodes a P6 file with maxval 255 into an `[h, w, 3]` tensor in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let (fields, body) = header_fields(bytes, 4)?;
    if fields[0] != "P6" {
        return Err(Error::invalid(format!("expected a P6 image, got {}", fields[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::invalid(format!("bad header field {s:?}")));
    let (w, h, max) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if max != 255 {
        return Err(Error::invalid("only 8-bit images are supported"));
    }
    let n = w * h * 3;
    let raster = bytes
        .get(body..body + n)
        .ok_or_else(|| Error::invalid("image raster is truncated"))?;
    Tensor::new(vec![h, w, 3], raster.iter().map(|&b| f64::from(b) / 255.0).collect())
}

/// Blends the heatmap (as a blue-to-red ramp) over the image with alpha 0.5
/// and outlines `bbox` in green.
pub fn overlay(image: &Tensor, heat: &Heatmap, bbox: Option<BoundingBox>) -> Result<Tensor> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    if image.rank() != 3 || image.shape()[2] != 3 || heat.rows() != h || heat.cols() != w {
        return Err(Error::shape(
            "overlay",
            format!("image {:?} vs heatmap {}x{}", image.shape(), heat.rows(), heat.cols()),
        ));
    }
    let mut out = image.clone();
    for r in 0..h {
        for c in 0..w {
            let v = heat.at(r, c);
            let color = [v, 0.0, 1.0 - v];
            for (ch, col) in color.iter().enumerate() {
                let blended = 0.5 * image.at(&[r, c, ch]) + 0.5 * col;
                out.set(&[r, c, ch], blended);
            }
        }
    }
    if let Some(b) = bbox {
        for r in b.y_min..b.y_max.min(h) {
            for c in b.x_min..b.x_max.min(w) {
                let edge = r == b.y_min || r + 1 == b.y_max || c == b.x_min || c + 1 == b.x_max;
                if edge {
                    out.set(&[r, c, 0], 0.0);
                    out.set(&[r, c, 1], 1.0);
                    out.set(&[r, c, 2], 0.0);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_body() {
        let h = Heatmap::from_grid(&Tensor::full(&[2, 3], 0.4)).unwrap();
        let bytes = encode_pgm(&h);
        assert_eq!(&bytes[..11], b"P5\n3 2\n255\n");
        assert_eq!(&bytes[11..], &[255; 6]);
    }

    #[test]
    fn ppm_round_trip() {
        let img = Tensor::new(vec![2, 2, 3], (0..12).map(|i| f64::from(i * 20) / 255.0).collect()).unwrap();
        let back = decode_ppm(&encode_ppm(&img).unwrap()).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(decode_ppm(b"P5\n1 1\n255\n\0").is_err());
    }
}
