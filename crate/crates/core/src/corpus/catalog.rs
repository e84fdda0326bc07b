use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const ITEM_TYPES: [&str; 10] = [
    "bag", "shoes", "dress", "shirt", "jacket", "scarf", "watch", "belt", "hat", "skirt",
];
pub const COLORS: [&str; 10] = [
    "red",
    "blue",
    "green",
    "black",
    "white",
    "brown",
    "pink",
    "purple",
    "dark blue",
    "light grey",
];
pub const MATERIALS: [&str; 8] = ["leather", "cotton", "silk", "wool", "denim", "linen", "suede", "nylon"];
pub const SIZES: [&str; 4] = ["small", "medium", "large", "extra large"];
pub const BRANDS: [&str; 10] = [
    "gucci", "prada", "zara", "nike", "adidas", "levis", "armani", "chanel", "dior", "versace",
];
pub const PRICES: [&str; 4] = ["budget", "moderate", "premium", "luxury"];

/// Catalog attribute kinds, in the order their one-hot blocks are laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Attribute {
    ItemType,
    Color,
    Material,
    Size,
    Brand,
    Price,
}

impl Attribute {
    pub const ALL: [Attribute; 6] = [
        Attribute::ItemType,
        Attribute::Color,
        Attribute::Material,
        Attribute::Size,
        Attribute::Brand,
        Attribute::Price,
    ];

    pub fn values(self) -> &'static [&'static str] {
        match self {
            Attribute::ItemType => &ITEM_TYPES,
            Attribute::Color => &COLORS,
            Attribute::Material => &MATERIALS,
            Attribute::Size => &SIZES,
            Attribute::Brand => &BRANDS,
            Attribute::Price => &PRICES,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Attribute::ItemType => "item_type",
            Attribute::Color => "color",
            Attribute::Material => "material",
            Attribute::Size => "size",
            Attribute::Brand => "brand",
            Attribute::Price => "price",
        }
    }
}

/// A catalog product; attributes are stored as indices into the fixed lists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CatalogItem {
    pub id: u32,
    pub item_type: usize,
    pub color: usize,
    pub material: usize,
    pub size: usize,
    pub brand: usize,
    pub price: usize,
}

impl CatalogItem {
    pub fn index(&self, attr: Attribute) -> usize {
        match attr {
            Attribute::ItemType => self.item_type,
            Attribute::Color => self.color,
            Attribute::Material => self.material,
            Attribute::Size => self.size,
            Attribute::Brand => self.brand,
            Attribute::Price => self.price,
        }
    }

    pub fn value(&self, attr: Attribute) -> &'static str {
        attr.values()[self.index(attr)]
    }

    /// Builds an item from attribute strings, checking each against its list.
    pub fn from_values(id: u32, values: [&str; 6]) -> Result<Self> {
        let mut idx = [0usize; 6];
        for (k, (attr, v)) in Attribute::ALL.iter().zip(values).enumerate() {
            idx[k] = attr
                .values()
                .iter()
                .position(|x| *x == v)
                .ok_or_else(|| Error::Validation(format!("item {id}: {v:?} is not a known {}", attr.name())))?;
        }
        Ok(CatalogItem {
            id,
            item_type: idx[0],
            color: idx[1],
            material: idx[2],
            size: idx[3],
            brand: idx[4],
            price: idx[5],
        })
    }
}

/// Uniformly samples `n` items with ids `0..n`.
pub fn generate_catalog(n: usize, seed: u64) -> Result<Vec<CatalogItem>> {
    if n < 1 {
        return Err(Error::Input("catalog size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|i| CatalogItem {
            id: i as u32,
            item_type: rng.gen_range(0..ITEM_TYPES.len()),
            color: rng.gen_range(0..COLORS.len()),
            material: rng.gen_range(0..MATERIALS.len()),
            size: rng.gen_range(0..SIZES.len()),
            brand: rng.gen_range(0..BRANDS.len()),
            price: rng.gen_range(0..PRICES.len()),
        })
        .collect())
}

const FEATURE_SEED: u64 = 0x1A6E_F3A7_0000_0001;

/// Frozen random projection from one-hot attribute codes to image features.
#[derive(Debug, Clone)]
pub struct ImageFeaturizer {
    dim: usize,
    /// one-hot width x dim, row-major
    projection: Vec<f64>,
}

impl ImageFeaturizer {
    pub fn one_hot_width() -> usize {
        Attribute::ALL.iter().map(|a| a.values().len()).sum()
    }

    pub fn new(dim: usize) -> Result<Self> {
        if dim < 8 {
            return Err(Error::Config(format!("image feature dimension {dim} is below 8")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(FEATURE_SEED);
        let rows = Self::one_hot_width();
        let projection: Vec<f64> = (0..rows * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Ok(ImageFeaturizer { dim, projection })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn feature(&self, item: &CatalogItem) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        let mut offset = 0;
        for attr in Attribute::ALL {
            let row = offset + item.index(attr);
            for (o, p) in out.iter_mut().zip(&self.projection[row * self.dim..(row + 1) * self.dim]) {
                *o += p;
            }
            offset += attr.values().len();
        }
        let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
        for o in &mut out {
            *o /= norm;
        }
        out
    }
}

/// Convenience wrapper building a featurizer for a single item.
pub fn image_feature(item: &CatalogItem, d_img: usize) -> Result<Vec<f64>> {
    Ok(ImageFeaturizer::new(d_img)?.feature(item))
}
