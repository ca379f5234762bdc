//! Minimal PNG read/write for the corpus and export formats.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};

fn encoder<'a>(
    file: BufWriter<File>,
    w: usize,
    h: usize,
    color: png::ColorType,
) -> png::Encoder<'a, BufWriter<File>> {
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    enc
}

pub fn write_rgb(path: &Path, w: usize, h: usize, data: &[u8]) -> Result<()> {
    assert_eq!(data.len(), w * h * 3);
    let enc = encoder(BufWriter::new(File::create(path)?), w, h, png::ColorType::Rgb);
    let mut writer = enc.write_header()?;
    writer.write_image_data(data)?;
    Ok(())
}

pub fn write_gray(path: &Path, w: usize, h: usize, data: &[u8]) -> Result<()> {
    assert_eq!(data.len(), w * h);
    let enc = encoder(
        BufWriter::new(File::create(path)?),
        w,
        h,
        png::ColorType::Grayscale,
    );
    let mut writer = enc.write_header()?;
    writer.write_image_data(data)?;
    Ok(())
}

/// Writes an indexed-color PNG; `palette` holds RGB triples per index.
pub fn write_indexed(path: &Path, w: usize, h: usize, indices: &[u8], palette: &[u8]) -> Result<()> {
    assert_eq!(indices.len(), w * h);
    assert_eq!(palette.len() % 3, 0);
    let mut enc = encoder(
        BufWriter::new(File::create(path)?),
        w,
        h,
        png::ColorType::Indexed,
    );
    enc.set_palette(palette.to_vec());
    let mut writer = enc.write_header()?;
    writer.write_image_data(indices)?;
    Ok(())
}

/// Reads an RGB8 PNG; errors on any other layout.
pub fn read_rgb(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut decoder = png::Decoder::new(File::open(path)?);
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info()?;
    let info = reader.info();
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Data(format!(
            "{}: expected 8-bit RGB PNG, got {:?}/{:?}",
            path.display(),
            info.color_type,
            info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let frame = reader.next_frame(&mut buf)?;
    buf.truncate(frame.buffer_size());
    Ok((w, h, buf))
}

/// Reads an indexed PNG and returns the raw palette indices.
pub fn read_indexed(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut decoder = png::Decoder::new(File::open(path)?);
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info()?;
    let info = reader.info();
    if info.color_type != png::ColorType::Indexed || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Data(format!(
            "{}: expected 8-bit indexed PNG, got {:?}/{:?}",
            path.display(),
            info.color_type,
            info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let frame = reader.next_frame(&mut buf)?;
    buf.truncate(frame.buffer_size());
    Ok((w, h, buf))
}

/// Fixed label palette: index 0 is black background, foreground classes get
/// saturated distinct hues.
pub fn label_palette(num_classes: usize) -> Vec<u8> {
    const HUES: [[u8; 3]; 8] = [
        [230, 60, 60],
        [60, 200, 80],
        [70, 90, 230],
        [230, 200, 50],
        [200, 70, 220],
        [60, 210, 210],
        [240, 140, 40],
        [150, 150, 150],
    ];
    let mut pal = vec![0u8, 0, 0];
    for c in 0..num_classes.saturating_sub(1) {
        pal.extend_from_slice(&HUES[c % HUES.len()]);
    }
    pal
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let data: Vec<u8> = (0..4 * 3 * 3).map(|i| (i * 7 % 256) as u8).collect();
        write_rgb(&path, 4, 3, &data).unwrap();
        let (w, h, back) = read_rgb(&path).unwrap();
        assert_eq!((w, h), (4, 3));
        assert_eq!(back, data);
    }

    #[test]
    fn indexed_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let idx: Vec<u8> = vec![0, 1, 2, 3, 2, 1];
        write_indexed(&path, 3, 2, &idx, &label_palette(4)).unwrap();
        let (w, h, back) = read_indexed(&path).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(back, idx);
    }
}
