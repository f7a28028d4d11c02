//! Mask files, gradient directories and path checks.

use std::fs;
use std::path::Path;

use densecnn::{ErrorMask, FeatureMap, GradientSet, NetworkSpec, Scalar, Shape};

use crate::Failure;

pub fn require_file(path: &Path) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Invalid(format!("{}: no such file", path.display())))
    }
}

/// Fails unless the parent directory of `path` exists.
pub fn require_parent(path: &Path) -> Result<(), Failure> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => {
            Err(Failure::Invalid(format!("{}: no such directory", p.display())))
        }
        _ => Ok(()),
    }
}

pub fn create_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))
}

/// Parses a mask file for an `height x width` error map. Blank lines and
/// `#` comments are skipped.
pub fn parse_mask(text: &str, height: usize, width: usize) -> Result<ErrorMask, Failure> {
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
        .collect();
    if let [(_, "all")] = lines[..] {
        return Ok(ErrorMask::all(height, width));
    }
    let mut pixels = Vec::with_capacity(lines.len());
    for (n, line) in lines {
        let coords: Vec<usize> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|_| Failure::Invalid(format!("mask line {n}: expected `y x`, found {line:?}")))?;
        match coords[..] {
            [y, x] => pixels.push((y, x)),
            _ => return Err(Failure::Invalid(format!("mask line {n}: expected `y x`, found {line:?}"))),
        }
    }
    Ok(ErrorMask::from_pixels(height, width, &pixels)?)
}

pub fn read_mask(path: &Path, height: usize, width: usize) -> Result<ErrorMask, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
    parse_mask(&text, height, width)
}

/// Writes `<name>.kernel.fmap` shaped `(out * in) x k x k` and
/// `<name>.bias.fmap` shaped `1 x 1 x out` for every conv layer.
pub fn write_gradients<T: Scalar>(dir: &Path, spec: &NetworkSpec<T>, grads: &GradientSet<T>) -> Result<(), Failure> {
    create_dir(dir)?;
    let names = spec.layer_names();
    for (k, g) in grads.conv_gradients() {
        let kshape = Shape::new(g.out_channels * g.in_channels, g.kernel_size, g.kernel_size)?;
        FeatureMap::from_vec(kshape, g.kernel.clone())?.write_fmap(dir.join(format!("{}.kernel.fmap", names[k])))?;
        let bshape = Shape::new(1, 1, g.out_channels)?;
        FeatureMap::from_vec(bshape, g.bias.clone())?.write_fmap(dir.join(format!("{}.bias.fmap", names[k])))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_all_and_pairs() {
        assert_eq!(parse_mask("all\n", 3, 4).unwrap(), ErrorMask::all(3, 4));
        let m = parse_mask("# corners\n0 0\n\n2 3  # last\n", 3, 4).unwrap();
        assert_eq!(m.pixels(), vec![(0, 0), (2, 3)]);
        assert!(parse_mask("", 3, 4).unwrap().is_empty());
    }

    #[test]
    fn mask_rejects_bad_lines() {
        for bad in ["1\n", "1 2 3\n", "a b\n", "3 0\n", "all\n0 0\n"] {
            assert!(matches!(parse_mask(bad, 3, 4), Err(Failure::Invalid(_))), "{bad:?}");
        }
    }
}
