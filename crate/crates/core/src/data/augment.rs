use super::Image;

/// The dihedral subset used for dataset enlargement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Augmentation {
    Orig,
    Rot90,
    Rot180,
    Rot270,
    HFlip,
    VFlip,
}

impl Augmentation {
    pub const ALL: [Augmentation; 6] = [
        Self::Orig,
        Self::Rot90,
        Self::Rot180,
        Self::Rot270,
        Self::HFlip,
        Self::VFlip,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Orig => "orig",
            Self::Rot90 => "rot90",
            Self::Rot180 => "rot180",
            Self::Rot270 => "rot270",
            Self::HFlip => "hflip",
            Self::VFlip => "vflip",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == name)
    }

    pub fn apply(self, img: &Image) -> Image {
        match self {
            Self::Orig => img.clone(),
            Self::Rot90 => rot90(img),
            Self::Rot180 => remap(img, img.height(), img.width(), |y, x| (img.height() - 1 - y, img.width() - 1 - x)),
            Self::Rot270 => remap(img, img.width(), img.height(), |y, x| (img.height() - 1 - x, y)),
            Self::HFlip => hflip(img),
            Self::VFlip => vflip(img),
        }
    }
}

/// Builds an `out_h × out_w` image where output `(y, x)` copies input `src(y, x)`.
fn remap(img: &Image, out_h: usize, out_w: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Image {
    let mut pixels = Vec::with_capacity(out_h * out_w * 3);
    for y in 0..out_h {
        for x in 0..out_w {
            let (sy, sx) = src(y, x);
            let i = (sy * img.width() + sx) * 3;
            pixels.extend_from_slice(&img.pixels()[i..i + 3]);
        }
    }
    Image::from_parts(out_h, out_w, pixels)
}

/// Counter-clockwise quarter turn; height and width swap.
pub fn rot90(img: &Image) -> Image {
    remap(img, img.width(), img.height(), |y, x| (x, img.width() - 1 - y))
}

/// Mirror left-right.
pub fn hflip(img: &Image) -> Image {
    remap(img, img.height(), img.width(), |y, x| (y, img.width() - 1 - x))
}

/// Mirror top-bottom.
pub fn vflip(img: &Image) -> Image {
    remap(img, img.height(), img.width(), |y, x| (img.height() - 1 - y, x))
}

/// `[identity, rot90, rot180, rot270, hflip, vflip]`
pub fn augment(img: &Image) -> Vec<Image> {
    Augmentation::ALL.iter().map(|a| a.apply(img)).collect()
}
