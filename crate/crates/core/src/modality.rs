use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::CoreError;

/// Sensor modality of an agent; the node type of the collaboration graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Camera,
    Lidar,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Camera, Modality::Lidar];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Camera => "camera",
            Modality::Lidar => "lidar",
        }
    }

    /// Wire tag used in message headers.
    pub fn tag(self) -> u8 {
        match self {
            Modality::Camera => 0,
            Modality::Lidar => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Modality> {
        match tag {
            0 => Some(Modality::Camera),
            1 => Some(Modality::Lidar),
            _ => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "camera" => Ok(Modality::Camera),
            "lidar" => Ok(Modality::Lidar),
            _ => Err(CoreError::Config(format!("unknown modality `{s}`"))),
        }
    }
}

/// Ordered (sender, receiver) modality pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EdgeType {
    pub sender: Modality,
    pub receiver: Modality,
}

impl EdgeType {
    pub fn new(sender: Modality, receiver: Modality) -> Self {
        Self { sender, receiver }
    }

    pub fn all() -> [EdgeType; 4] {
        let [c, l] = Modality::ALL;
        [EdgeType::new(c, c), EdgeType::new(c, l), EdgeType::new(l, c), EdgeType::new(l, l)]
    }

    /// Parameter-name segment, e.g. `camera_to_lidar`.
    pub fn key(self) -> String {
        format!("{}_to_{}", self.sender, self.receiver)
    }

    /// Owner tag recorded in the parameter store.
    pub fn owner(self) -> String {
        format!("edge:{}->{}", self.sender, self.receiver)
    }

    pub fn involves(self, m: Modality) -> bool {
        self.sender == m || self.receiver == m
    }
}
