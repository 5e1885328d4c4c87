//! Image export. Latents live in [−1, 1] per channel; files get the usual
//! 8-bit mapping with a clamp first, so out-of-range pixels saturate
//! instead of wrapping.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scene::Region;
use crate::tensor::Tensor;

/// Map one latent value to a byte: clamp to [−1, 1], then scale.
pub fn to_byte(v: f64) -> u8 {
    let c = v.clamp(-1.0, 1.0);
    ((c + 1.0) * 127.5).round() as u8
}

/// Interleave a [3, H, W] latent into 8-bit RGB rows.
pub fn to_rgb8(t: &Tensor) -> Result<(Vec<u8>, usize, usize)> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("to_rgb8", s, &[3, 0, 0]));
    }
    let (h, w) = (s[1], s[2]);
    let mut buf = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        for c in 0..3 {
            buf.push(to_byte(t.data()[c * h * w + p]));
        }
    }
    Ok((buf, h, w))
}

/// Binary PPM (P6).
pub fn write_ppm(path: &Path, t: &Tensor) -> Result<()> {
    let (buf, h, w) = to_rgb8(t)?;
    let file = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    let mut out = std::io::BufWriter::new(file);
    let write = |out: &mut std::io::BufWriter<std::fs::File>, bytes: &[u8]| {
        out.write_all(bytes).map_err(|e| Error::io(format!("write {}", path.display()), e))
    };
    write(&mut out, format!("P6\n{w} {h}\n255\n").as_bytes())?;
    write(&mut out, &buf)
}

/// Binary PGM (P5) of a 0/1 region, 255 inside.
pub fn write_region_pgm(path: &Path, r: &Region) -> Result<()> {
    let (h, w) = (r.height(), r.width());
    let mut buf = vec![0u8; h * w];
    for p in r.pixels() {
        buf[p] = 255;
    }
    let mut data = format!("P5\n{w} {h}\n255\n").into_bytes();
    data.extend_from_slice(&buf);
    std::fs::write(path, data).map_err(|e| Error::io(format!("write {}", path.display()), e))
}

/// PNG, via the `image` crate.
pub fn write_png(path: &Path, t: &Tensor) -> Result<()> {
    let (buf, h, w) = to_rgb8(t)?;
    let img = image::RgbImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer length matches dimensions by construction");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::BadDump(format!("png encode {}: {e}", path.display())))
}

/// Write `path` with the extension's format: `.png` gets PNG, anything
/// else binary PPM.
pub fn write_auto(path: &Path, t: &Tensor) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => write_png(path, t),
        _ => write_ppm(path, t),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_mapping_clamps_and_scales() {
        assert_eq!(to_byte(-1.0), 0);
        assert_eq!(to_byte(1.0), 255);
        assert_eq!(to_byte(0.0), 128); // 127.5 rounds half-up
        assert_eq!(to_byte(-7.0), 0);
        assert_eq!(to_byte(3.5), 255);
    }

    #[test]
    fn ppm_bytes_are_exactly_header_plus_pixels() {
        let t = Tensor::from_fn(&[3, 2, 2], |i| (i as f64) / 6.0 - 1.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        write_ppm(&path, &t).unwrap();
        let got = std::fs::read(&path).unwrap();
        assert_eq!(&got[..11], b"P6\n2 2\n255\n");
        assert_eq!(got.len(), 11 + 12);
        // first pixel: channels 0, 4, 8 of the latent
        let want0 = [to_byte(-1.0), to_byte(4.0 / 6.0 - 1.0), to_byte(8.0 / 6.0 - 1.0)];
        assert_eq!(&got[11..14], &want0);
    }

    #[test]
    fn png_round_trips_through_the_decoder() {
        let t = Tensor::from_fn(&[3, 4, 5], |i| ((i * 37 % 19) as f64) / 9.5 - 1.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        write_png(&path, &t).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        assert_eq!((img.width(), img.height()), (5, 4));
        let (buf, _, _) = to_rgb8(&t).unwrap();
        assert_eq!(img.into_raw(), buf);
    }

    #[test]
    fn region_pgm_marks_members_only() {
        let r = Region::from_pixels(2, 3, [0, 4]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        write_region_pgm(&path, &r).unwrap();
        let got = std::fs::read(&path).unwrap();
        assert_eq!(&got[..11], b"P5\n3 2\n255\n");
        let pixels = &got[11..];
        assert_eq!(pixels, &[255, 0, 0, 0, 255, 0]);
    }

    #[test]
    fn auto_picks_format_from_extension() {
        let t = Tensor::zeros(&[3, 2, 2]);
        let dir = tempfile::tempdir().unwrap();
        let ppm = dir.path().join("a.ppm");
        let png = dir.path().join("a.png");
        write_auto(&ppm, &t).unwrap();
        write_auto(&png, &t).unwrap();
        assert_eq!(&std::fs::read(&ppm).unwrap()[..2], b"P6");
        assert_eq!(&std::fs::read(&png).unwrap()[..4], b"\x89PNG");
    }
}
