//! Binary PGM (P5) and PPM (P6) export.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn plane_dims(t: &Tensor<f32>, channels: usize, op: &'static str) -> Result<(usize, usize)> {
    let s = t.shape();
    match s {
        [h, w] if channels == 1 => Ok((*h, *w)),
        [c, h, w] if *c == channels => Ok((*h, *w)),
        _ => Err(Error::shape(op, format!("expected ({channels},H,W), got {s:?}"))),
    }
}

/// `(1, H, W)` or `(H, W)` in `[0, 1]` to P5 bytes, `round(255 v)` per pixel.
pub fn encode_pgm(mask: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = plane_dims(mask, 1, "export_pgm")?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(mask.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

/// `(3, H, W)` in `[0, 1]` to P6 bytes.
pub fn encode_ppm(rgb: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = plane_dims(rgb, 3, "export_ppm")?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = rgb.data();
    let plane = h * w;
    for i in 0..plane {
        out.extend([quantize(d[i]), quantize(d[plane + i]), quantize(d[2 * plane + i])]);
    }
    Ok(out)
}

pub fn export_pgm(mask: &Tensor<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_pgm(mask)?)?;
    Ok(())
}

pub fn export_ppm(rgb: &Tensor<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_ppm(rgb)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_payload() {
        let zero = encode_pgm(&Tensor::zeros(&[1, 4, 4])).unwrap();
        assert!(zero.starts_with(b"P5\n4 4\n255\n"));
        assert!(zero[11..].iter().all(|&b| b == 0));
        assert_eq!(zero.len(), 11 + 16);
        let one = encode_pgm(&Tensor::ones(&[1, 4, 4])).unwrap();
        assert!(one[11..].iter().all(|&b| b == 0xFF));
        let half = encode_pgm(&Tensor::full(&[2, 3], 0.5)).unwrap();
        assert!(half.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(half[11], 128);
    }

    #[test]
    fn ppm_interleaves() {
        let t = Tensor::new(&[3, 1, 1], vec![1.0, 0.0, 0.5]).unwrap();
        assert_eq!(encode_ppm(&t).unwrap(), b"P6\n1 1\n255\n\xff\x00\x80".to_vec());
    }

    #[test]
    fn io_errors_surface() {
        let e = export_pgm(&Tensor::zeros(&[1, 2, 2]), Path::new("/nonexistent/dir/x.pgm")).unwrap_err();
        assert!(matches!(e, Error::Io(_)));
    }
}
