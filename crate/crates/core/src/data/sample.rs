use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::DataError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Benign,
    Malignant,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Benign, Label::Malignant];

    /// Class index used by the network head.
    pub fn index(self) -> usize {
        match self {
            Label::Benign => 0,
            Label::Malignant => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Benign => "benign",
            Label::Malignant => "malignant",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "benign" => Ok(Label::Benign),
            "malignant" => Ok(Label::Malignant),
            _ => Err(format!("unknown label {s:?}")),
        }
    }
}

/// Microscope magnification level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Magnification {
    X40,
    X100,
    X200,
    X400,
}

impl Magnification {
    pub const ALL: [Magnification; 4] = [Self::X40, Self::X100, Self::X200, Self::X400];

    pub fn value(self) -> u32 {
        match self {
            Self::X40 => 40,
            Self::X100 => 100,
            Self::X200 => 200,
            Self::X400 => 400,
        }
    }

    pub fn from_value(v: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.value() == v)
    }
}

impl fmt::Display for Magnification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.value())
    }
}

impl FromStr for Magnification {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim().trim_end_matches(['x', 'X']);
        t.parse::<u32>()
            .ok()
            .and_then(Self::from_value)
            .ok_or_else(|| format!("unknown magnification {s:?}"))
    }
}

impl Serialize for Magnification {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u32(self.value())
    }
}

impl<'de> Deserialize<'de> for Magnification {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = u32::deserialize(d)?;
        Self::from_value(v).ok_or_else(|| serde::de::Error::custom(format!("unknown magnification {v}")))
    }
}

/// One histopathology image record.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Sample {
    /// Path relative to the manifest's directory.
    pub path: String,
    pub label: Label,
    pub patient_id: String,
    pub magnification: Magnification,
}

/// Augmented files are named `<stem>__<aug>.png`; this returns `(stem, aug)`.
pub fn split_augmented_name(path: &str) -> (&str, Option<&str>) {
    let base = path.strip_suffix(".png").unwrap_or(path);
    match base.rsplit_once("__") {
        Some((stem, aug)) if super::Augmentation::from_name(aug).is_some() => (stem, Some(aug)),
        _ => (base, None),
    }
}

impl Sample {
    /// Identity shared by an image and all its augmented variants.
    pub fn source_key(&self) -> &str {
        split_augmented_name(&self.path).0
    }

    /// True for augmented variants other than the untouched original.
    pub fn is_augmented(&self) -> bool {
        matches!(split_augmented_name(&self.path).1, Some(a) if a != "orig")
    }
}

pub(crate) fn parse_row_field<T: FromStr<Err = String>>(value: &str, row: usize) -> Result<T, DataError> {
    value.parse().map_err(|message| DataError::Manifest { row, message })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_parsing_is_case_insensitive() {
        assert_eq!("Benign".parse::<Label>().unwrap(), Label::Benign);
        assert_eq!("MALIGNANT".parse::<Label>().unwrap(), Label::Malignant);
        assert!("normal".parse::<Label>().is_err());
    }

    #[test]
    fn magnification_values() {
        assert_eq!("400".parse::<Magnification>().unwrap(), Magnification::X400);
        assert_eq!("40X".parse::<Magnification>().unwrap(), Magnification::X40);
        assert!("250".parse::<Magnification>().is_err());
    }

    #[test]
    fn augmented_names() {
        assert_eq!(split_augmented_name("a/img_01__rot90.png"), ("a/img_01", Some("rot90")));
        assert_eq!(split_augmented_name("a/img_01.png"), ("a/img_01", None));
        assert_eq!(split_augmented_name("a/x__y.png"), ("a/x__y", None));
    }
}
