use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{flip_horizontal, rotate};
use crate::error::{invalid, Result};
use crate::image::Image;

/// Element of the dihedral group of the square: an optional horizontal
/// flip followed by `quarter_turns` counter-clockwise quarter turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dihedral {
    quarter_turns: u8,
    flip: bool,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral {
        quarter_turns: 0,
        flip: false,
    };

    pub fn new(quarter_turns: u8, flip: bool) -> Self {
        Self {
            quarter_turns: quarter_turns % 4,
            flip,
        }
    }

    /// All eight elements, identity first.
    pub fn all() -> [Dihedral; 8] {
        std::array::from_fn(|i| Dihedral::new((i % 4) as u8, i >= 4))
    }

    /// Elements that map an `h×w` image onto the same shape.
    pub fn shape_preserving(height: usize, width: usize) -> Vec<Dihedral> {
        Self::all()
            .into_iter()
            .filter(|d| height == width || d.quarter_turns % 2 == 0)
            .collect()
    }

    pub fn inverse(self) -> Dihedral {
        if self.flip {
            self
        } else {
            Dihedral::new((4 - self.quarter_turns) % 4, false)
        }
    }

    pub fn apply(self, img: &Image) -> Image {
        let mut out = if self.flip {
            flip_horizontal(img)
        } else {
            img.clone()
        };
        for _ in 0..self.quarter_turns {
            out = quarter_turn(&out);
        }
        out
    }
}

fn quarter_turn(img: &Image) -> Image {
    let (h, w, c) = img.shape();
    Image::from_fn(w, h, c, |y, x, ch| img.get(h - 1 - x, y, ch))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TtaMode {
    /// Exact flips and quarter turns.
    #[default]
    Dihedral,
    /// Random horizontal flip plus a continuous-angle rotation.
    RandomRotation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ViewTransform {
    Dihedral(Dihedral),
    Rotation { degrees: f64, hflip: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TtaView {
    pub image: Image,
    pub transform: ViewTransform,
}

/// `k` views of `image`. View 0 is always the identity.
///
/// In dihedral mode the remaining views are distinct group elements in a
/// seeded order; past the group order they repeat, drawn with replacement.
pub fn tta_views(image: &Image, k: usize, seed: u64, mode: TtaMode) -> Result<Vec<TtaView>> {
    if k < 1 {
        return Err(invalid("tta.k must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut views = Vec::with_capacity(k);
    views.push(TtaView {
        image: image.clone(),
        transform: ViewTransform::Dihedral(Dihedral::IDENTITY),
    });
    match mode {
        TtaMode::Dihedral => {
            let group = Dihedral::shape_preserving(image.height(), image.width());
            let mut rest: Vec<Dihedral> = group[1..].to_vec();
            rest.shuffle(&mut rng);
            while views.len() < k {
                let d = if views.len() - 1 < rest.len() {
                    rest[views.len() - 1]
                } else {
                    group[rng.random_range(0..group.len())]
                };
                views.push(TtaView {
                    image: d.apply(image),
                    transform: ViewTransform::Dihedral(d),
                });
            }
        }
        TtaMode::RandomRotation => {
            while views.len() < k {
                let hflip = rng.random_bool(0.5);
                let degrees = rng.random_range(-180.0..180.0);
                let base = if hflip {
                    flip_horizontal(image)
                } else {
                    image.clone()
                };
                views.push(TtaView {
                    image: rotate(&base, degrees),
                    transform: ViewTransform::Rotation { degrees, hflip },
                });
            }
        }
    }
    Ok(views)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn asymmetric(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, 2, |y, x, c| (y * 31 + x * 7 + c) as f32)
    }

    #[test]
    fn single_view_is_identity() {
        let img = asymmetric(5, 5);
        let views = tta_views(&img, 1, 0, TtaMode::Dihedral).unwrap();
        assert_eq!(views.len(), 1);
        assert_eq!(views[0].image, img);
        assert!(tta_views(&img, 0, 0, TtaMode::Dihedral).is_err());
    }

    #[test]
    fn eight_views_are_the_whole_group() {
        let img = asymmetric(6, 6);
        let views = tta_views(&img, 8, 123, TtaMode::Dihedral).unwrap();
        let transforms: HashSet<_> = views
            .iter()
            .map(|v| match v.transform {
                ViewTransform::Dihedral(d) => d,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(transforms.len(), 8);
        let images: HashSet<Vec<u32>> = views
            .iter()
            .map(|v| v.image.data().iter().map(|f| f.to_bits()).collect())
            .collect();
        assert_eq!(images.len(), 8);
    }

    #[test]
    fn inverse_recovers_input() {
        let img = asymmetric(4, 4);
        for v in tta_views(&img, 8, 5, TtaMode::Dihedral).unwrap() {
            let ViewTransform::Dihedral(d) = v.transform else {
                unreachable!()
            };
            assert_eq!(d.inverse().apply(&v.image), img);
        }
    }

    #[test]
    fn non_square_views_keep_shape() {
        let img = asymmetric(4, 7);
        let views = tta_views(&img, 8, 1, TtaMode::Dihedral).unwrap();
        assert!(views.iter().all(|v| v.image.shape() == img.shape()));
        let random = tta_views(&img, 4, 1, TtaMode::RandomRotation).unwrap();
        assert!(random.iter().all(|v| v.image.shape() == img.shape()));
    }

    #[test]
    fn views_are_pure_in_seed() {
        let img = asymmetric(5, 5);
        for mode in [TtaMode::Dihedral, TtaMode::RandomRotation] {
            assert_eq!(
                tta_views(&img, 5, 77, mode).unwrap(),
                tta_views(&img, 5, 77, mode).unwrap()
            );
        }
    }
}
