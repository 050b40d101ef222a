use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Mid-axial slice as a binary PGM with three panels side by side: intensity, planted
/// mask over intensity, predicted mask over intensity. Masked voxels are drawn white.
pub fn mid_axial_pgm(volume: &Volume, planted: &[bool], predicted: &[bool]) -> Result<Vec<u8>> {
    if planted.len() != volume.len() || predicted.len() != volume.len() {
        return Err(Error::invalid("mid_axial_pgm", "masks must match the volume"));
    }
    let [nz, ny, nx] = volume.extents;
    let z = nz / 2;
    let (lo, hi) = volume.intensities.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let grey = |i: usize| (((volume.intensities[i] - lo) / span) * 200.0).round() as u8;
    let mut out = format!("P5\n{} {}\n255\n", 3 * nx, ny).into_bytes();
    for y in 0..ny {
        for panel in 0..3 {
            for x in 0..nx {
                let i = volume.index(z, y, x);
                let lit = match panel {
                    1 => planted[i],
                    2 => predicted[i],
                    _ => false,
                };
                out.push(if lit { 255 } else { grey(i) });
            }
        }
    }
    Ok(out)
}

pub fn write_mid_axial_pgm(volume: &Volume, planted: &[bool], predicted: &[bool], path: &Path) -> Result<()> {
    let bytes = mid_axial_pgm(volume, planted, predicted)?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_size() {
        let v = Volume::filled([4, 3, 5], 1.0, 0.0);
        let m = vec![false; v.len()];
        let b = mid_axial_pgm(&v, &m, &m).unwrap();
        let header = b"P5\n15 3\n255\n";
        assert_eq!(&b[..header.len()], header);
        assert_eq!(b.len(), header.len() + 15 * 3);
    }
}
