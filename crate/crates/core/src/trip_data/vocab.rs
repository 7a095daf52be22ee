//! Closed categorical vocabularies for trip records.
//!
//! Every vocabulary carries its canonical CSV spelling, a fixed iteration
//! order and the sample frequencies of the Seattle survey extract, which the
//! synthetic generator draws from.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Error returned when a string is not part of a closed vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown {vocabulary} value {value:?}")]
pub struct UnknownValue {
    pub vocabulary: &'static str,
    pub value: String,
}

fn normalize(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_ascii_lowercase()
}

macro_rules! vocabulary {
    (
        $(#[$meta:meta])*
        $name:ident, $vocab:literal {
            $($variant:ident => $label:literal, $count:literal $(| $alias:literal)*;)+
        }
    ) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name {
            $($variant,)+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant,)+];

            /// Canonical CSV spelling.
            pub fn label(self) -> &'static str {
                match self {
                    $($name::$variant => $label,)+
                }
            }

            /// Position in the canonical ordering.
            pub fn index(self) -> usize {
                self as usize
            }

            /// Record count observed in the Seattle extract.
            pub fn survey_count(self) -> u32 {
                match self {
                    $($name::$variant => $count,)+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.label())
            }
        }

        impl FromStr for $name {
            type Err = UnknownValue;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                let key = normalize(s);
                $(
                    if key == normalize($label) $(|| key == normalize($alias))* {
                        return Ok($name::$variant);
                    }
                )+
                Err(UnknownValue { vocabulary: $vocab, value: s.to_string() })
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
                serializer.serialize_str(self.label())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
                let s = String::deserialize(deserializer)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

vocabulary! {
    /// Travel mode chosen for a trip. The canonical order
    /// (Drive, Walk, Transit, Bike/Micromobility) drives every deterministic
    /// iteration over classes.
    TripMode, "trip mode" {
        Drive => "Drive", 1271;
        Walk => "Walk", 1031;
        Transit => "Transit", 379;
        BikeMicromobility => "Bike/Micromobility", 166 | "BikeMicromobility" | "Bike/Mircomobility" | "Bike";
    }
}

/// Number of modes in the choice set.
pub const NUM_MODES: usize = 4;

impl TripMode {
    pub fn from_index(i: usize) -> Option<TripMode> {
        TripMode::ALL.get(i).copied()
    }
}

vocabulary! {
    AgeBand, "age band" {
        Age18To24 => "18-24", 288;
        Age25To34 => "25-34", 877;
        Age35To44 => "35-44", 757;
        Age45To54 => "45-54", 358;
        Age55To64 => "55-64", 276;
        Age65To74 => "65-74", 224;
        Age75Plus => "75 or older", 67 | "75+";
    }
}

vocabulary! {
    Gender, "gender" {
        Male => "Male", 1261;
        Female => "Female", 1530 | "Famale";
        NonBinary => "Non-binary", 56 | "Nonbinary";
    }
}

vocabulary! {
    Education, "education" {
        LessThanHighSchool => "Less than high school", 25;
        HighSchool => "High school", 151;
        SomeCollege => "Some college", 239;
        Vocational => "Vocational/technical training", 14;
        Associates => "Associates degree", 128 | "Associate degree";
        Bachelor => "Bachelor degree", 1259 | "Bachelors degree" | "Bachelor's degree";
        Graduate => "Graduate degree", 1031;
    }
}

vocabulary! {
    IncomeBand, "income band" {
        Under25k => "Under $25,000", 182;
        From25kTo50k => "$25,000-$49,999", 447;
        From50kTo75k => "$50,000-$74,999", 335;
        From75kTo100k => "$75,000-$99,999", 465;
        From100kTo200k => "$100,000-$199,999", 848;
        Over200k => "$200,000 or more", 570;
    }
}

vocabulary! {
    TripPurpose, "trip purpose" {
        Home => "Home", 1074;
        Work => "Work", 390;
        SocialRecreation => "Social/Recreation", 463;
        Shopping => "Shopping", 341;
        Meal => "Meal", 219;
        BusinessErrand => "Business/Errand", 140;
        Escort => "Escort", 131;
        Overnight => "Overnight", 68;
        School => "School", 18;
        ChangeMode => "Change mode", 3;
    }
}
