use std::fs;
use std::path::Path;

use super::{PerturbationKind, PerturbationSpec};
use crate::error::{Error, Result};

/// Binary PPM (P6) rendering of a perturbation. Universal perturbations map
/// `[-epsilon, epsilon]` onto `[0, 255]`; patches map `[0, 1]` onto it.
/// Single-channel data is written as gray.
pub fn encode_ppm(spec: &PerturbationSpec) -> Result<Vec<u8>> {
    let xi = spec.xi();
    let (c, h, w) = (xi.shape()[0], xi.shape()[1], xi.shape()[2]);
    if c != 1 && c != 3 {
        return Err(Error::invalid(format!("cannot render {c} channels as PPM")));
    }
    let to_byte = |v: f64| -> u8 {
        let unit = match spec.kind() {
            PerturbationKind::Universal { epsilon } if epsilon > 0.0 => (v + epsilon) / (2.0 * epsilon),
            PerturbationKind::Universal { .. } => 0.5,
            PerturbationKind::Patch { .. } => v,
        };
        (unit * 255.0).round().clamp(0.0, 255.0) as u8
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let d = xi.data();
    for p in 0..plane {
        for k in 0..3 {
            let ch = if c == 1 { 0 } else { k };
            out.push(to_byte(d[ch * plane + p]));
        }
    }
    Ok(out)
}

pub fn export_ppm(spec: &PerturbationSpec, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_ppm(spec)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn universal_extremes_map_to_byte_range() {
        let eps = 8.0 / 255.0;
        let xi = Tensor::new(vec![1, 1, 3], vec![-eps, 0.0, eps]).unwrap();
        let spec = PerturbationSpec::universal(xi, eps).unwrap();
        let bytes = encode_ppm(&spec).unwrap();
        let header = b"P6\n3 1\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0, 0, 0, 128, 128, 128, 255, 255, 255]);
    }
}
