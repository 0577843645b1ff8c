//! FDI two-digit tooth numbering and the semantic class map.
//!
//! Upper and lower teeth at the same arch position share one class id:
//! patient-right positions 1..=8 map to classes 1..=8, patient-left positions
//! map to 9..=16. Class 0 is gingiva and class 17 marks a prepared tooth.

use std::fmt;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GINGIVA: u8 = 0;
pub const PREPARED: u8 = 17;
pub const NUM_TOOTH_CLASSES: usize = 16;
/// Gingiva, sixteen tooth classes and the prepared class.
pub const NUM_CLASSES: usize = 18;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Jaw {
    Upper,
    Lower,
}

impl Jaw {
    pub fn opposite(self) -> Jaw {
        match self {
            Jaw::Upper => Jaw::Lower,
            Jaw::Lower => Jaw::Upper,
        }
    }

    /// Direction the occlusal surfaces face in the standardized frame.
    pub fn occlusal_dir(self) -> Vector3<f64> {
        match self {
            Jaw::Upper => -Vector3::z(),
            Jaw::Lower => Vector3::z(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Jaw::Upper => "upper",
            Jaw::Lower => "lower",
        }
    }
}

/// Patient side; patient-left is +x in the standardized frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn mirrored(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }

    pub fn x_sign(self) -> f64 {
        match self {
            Side::Left => 1.0,
            Side::Right => -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Fdi(u8);

impl Fdi {
    pub fn new(code: u8) -> Result<Fdi> {
        let (q, p) = (code / 10, code % 10);
        if (1..=4).contains(&q) && (1..=8).contains(&p) {
            Ok(Fdi(code))
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid FDI code {code}: expected quadrant 1-4 and position 1-8"
            )))
        }
    }

    pub fn from_parts(jaw: Jaw, side: Side, position: u8) -> Result<Fdi> {
        let q = match (jaw, side) {
            (Jaw::Upper, Side::Right) => 1,
            (Jaw::Upper, Side::Left) => 2,
            (Jaw::Lower, Side::Left) => 3,
            (Jaw::Lower, Side::Right) => 4,
        };
        Fdi::new(q * 10 + position)
    }

    pub fn code(self) -> u8 {
        self.0
    }

    pub fn quadrant(self) -> u8 {
        self.0 / 10
    }

    pub fn position(self) -> u8 {
        self.0 % 10
    }

    pub fn jaw(self) -> Jaw {
        match self.quadrant() {
            1 | 2 => Jaw::Upper,
            _ => Jaw::Lower,
        }
    }

    pub fn side(self) -> Side {
        match self.quadrant() {
            1 | 4 => Side::Right,
            _ => Side::Left,
        }
    }

    /// Semantic class id in 1..=16.
    pub fn class(self) -> u8 {
        match self.side() {
            Side::Right => self.position(),
            Side::Left => self.position() + 8,
        }
    }

    /// Recovers the tooth of a class on the given jaw.
    pub fn from_class(jaw: Jaw, class: u8) -> Result<Fdi> {
        match class {
            1..=8 => Fdi::from_parts(jaw, Side::Right, class),
            9..=16 => Fdi::from_parts(jaw, Side::Left, class - 8),
            _ => Err(Error::InvalidArgument(format!("class {class} is not a tooth class"))),
        }
    }

    /// Premolars and molars.
    pub fn is_posterior(self) -> bool {
        self.position() >= 4
    }

    /// Position along the arch running from the patient-right last molar,
    /// through the midline, to the patient-left last molar.
    pub fn arch_order(self) -> u8 {
        arch_order_of_class(self.class())
    }

    /// Adjacent tooth toward the midline; crosses the midline for centrals.
    pub fn mesial_neighbor(self) -> Fdi {
        if self.position() > 1 {
            Fdi(self.0 - 1)
        } else {
            let q = match self.quadrant() {
                1 => 2,
                2 => 1,
                3 => 4,
                _ => 3,
            };
            Fdi(q * 10 + 1)
        }
    }

    /// Adjacent tooth away from the midline, absent after the third molar.
    pub fn distal_neighbor(self) -> Option<Fdi> {
        (self.position() < 8).then(|| Fdi(self.0 + 1))
    }

    /// Same position in the opposing jaw.
    pub fn antagonist(self) -> Fdi {
        let q = match self.quadrant() {
            1 => 4,
            2 => 3,
            3 => 2,
            _ => 1,
        };
        Fdi(q * 10 + self.position())
    }
}

pub fn arch_order_of_class(class: u8) -> u8 {
    if class <= 8 {
        8 - class
    } else {
        class - 1
    }
}

pub fn is_tooth_class(class: u8) -> bool {
    (1..=16).contains(&class)
}

impl TryFrom<u8> for Fdi {
    type Error = Error;
    fn try_from(v: u8) -> Result<Fdi> {
        Fdi::new(v)
    }
}

impl From<Fdi> for u8 {
    fn from(f: Fdi) -> u8 {
        f.0
    }
}

impl fmt::Display for Fdi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::str::FromStr for Fdi {
    type Err = Error;
    fn from_str(s: &str) -> Result<Fdi> {
        let code: u8 = s
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("invalid FDI code '{s}'")))?;
        Fdi::new(code)
    }
}
