//! The named color palette of the synthetic color world.
//!
//! All channel values lie on the grid {0, 0.5, 1}, so any two palette entries are at
//! least 0.5 apart in L1 distance. The toy backbone's color detectors and the toy text
//! encoder both index colors by their position in [`PALETTE`].

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NamedColor {
    pub name: &'static str,
    pub rgb: [f32; 3],
}

pub const PALETTE: &[NamedColor] = &[
    NamedColor { name: "red", rgb: [1.0, 0.0, 0.0] },
    NamedColor { name: "green", rgb: [0.0, 1.0, 0.0] },
    NamedColor { name: "blue", rgb: [0.0, 0.0, 1.0] },
    NamedColor { name: "yellow", rgb: [1.0, 1.0, 0.0] },
    NamedColor { name: "magenta", rgb: [1.0, 0.0, 1.0] },
    NamedColor { name: "orange", rgb: [1.0, 0.5, 0.0] },
    NamedColor { name: "cyan", rgb: [0.0, 1.0, 1.0] },
    NamedColor { name: "purple", rgb: [0.5, 0.0, 1.0] },
    NamedColor { name: "lime", rgb: [0.5, 1.0, 0.0] },
    NamedColor { name: "gray", rgb: [0.5, 0.5, 0.5] },
    NamedColor { name: "black", rgb: [0.0, 0.0, 0.0] },
    NamedColor { name: "white", rgb: [1.0, 1.0, 1.0] },
    NamedColor { name: "pink", rgb: [1.0, 0.5, 1.0] },
    NamedColor { name: "teal", rgb: [0.0, 0.5, 0.5] },
    NamedColor { name: "navy", rgb: [0.0, 0.0, 0.5] },
    NamedColor { name: "maroon", rgb: [0.5, 0.0, 0.0] },
];

/// Length of a color prototype: one axis per palette entry plus three RGB axes.
pub const PROTOTYPE_DIM: usize = 16 + 3;

/// Weight of the RGB block relative to the one-hot block.
const PROTOTYPE_RGB_WEIGHT: f32 = 1.0;

/// Unit-norm prototype of palette entry `index`: its one-hot axis followed by its
/// weighted RGB coordinates, so that similar colors have similar prototypes.
pub fn prototype(index: usize) -> [f32; PROTOTYPE_DIM] {
    let mut v = [0.0f32; PROTOTYPE_DIM];
    v[index] = 1.0;
    for c in 0..3 {
        v[PALETTE.len() + c] = PROTOTYPE_RGB_WEIGHT * PALETTE[index].rgb[c];
    }
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

pub fn palette_index(name: &str) -> Option<usize> {
    PALETTE.iter().position(|c| c.name == name)
}

pub fn lookup(name: &str) -> Option<&'static NamedColor> {
    PALETTE.iter().find(|c| c.name == name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palette_min_l1_separation() {
        for (i, a) in PALETTE.iter().enumerate() {
            for b in &PALETTE[i + 1..] {
                let d: f32 = (0..3).map(|c| (a.rgb[c] - b.rgb[c]).abs()).sum();
                assert!(d >= 0.5 - 1e-6, "{} vs {}", a.name, b.name);
            }
        }
    }

    #[test]
    fn prototypes_unit_norm_and_similarity_ordered() {
        assert_eq!(PROTOTYPE_DIM, PALETTE.len() + 3);
        let cos = |a: &str, b: &str| {
            let (x, y) = (prototype(palette_index(a).unwrap()), prototype(palette_index(b).unwrap()));
            x.iter().zip(&y).map(|(p, q)| p * q).sum::<f32>()
        };
        for k in 0..PALETTE.len() {
            let n: f32 = prototype(k).iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-6);
        }
        // cyan = (0,1,1): blue shares one channel, red none
        assert!((cos("cyan", "blue") - 1.0 / 6f32.sqrt()).abs() < 1e-6);
        assert_eq!(cos("cyan", "red"), 0.0);
        assert_eq!(cos("black", "white"), 0.0);
    }

    #[test]
    fn names_unique() {
        for (i, c) in PALETTE.iter().enumerate() {
            assert_eq!(palette_index(c.name), Some(i));
        }
    }
}
