//! The three visual channels and per-channel containers.

use std::fmt;
use std::ops::{Index, IndexMut};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// A visual cue stream. The discriminant is the channel's position in
/// attention vectors, mode files and traces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Face = 0,
    Pose = 1,
    Hat = 2,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::Face, Channel::Pose, Channel::Hat];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Channel> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::Face => "face",
            Channel::Pose => "pose",
            Channel::Hat => "hat",
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One value per channel, serialized as `{"face": .., "pose": .., "hat": ..}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PerChannel<X> {
    pub face: X,
    pub pose: X,
    pub hat: X,
}

impl<X> PerChannel<X> {
    pub fn new(face: X, pose: X, hat: X) -> Self {
        Self { face, pose, hat }
    }

    pub fn from_fn(mut f: impl FnMut(Channel) -> X) -> Self {
        Self {
            face: f(Channel::Face),
            pose: f(Channel::Pose),
            hat: f(Channel::Hat),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (Channel, &X)> {
        [(Channel::Face, &self.face), (Channel::Pose, &self.pose), (Channel::Hat, &self.hat)].into_iter()
    }

    pub fn map<Y>(&self, mut f: impl FnMut(Channel, &X) -> Y) -> PerChannel<Y> {
        PerChannel::from_fn(|c| f(c, &self[c]))
    }

    pub fn as_array(&self) -> [&X; 3] {
        [&self.face, &self.pose, &self.hat]
    }
}

impl<X> Index<Channel> for PerChannel<X> {
    type Output = X;
    fn index(&self, c: Channel) -> &X {
        match c {
            Channel::Face => &self.face,
            Channel::Pose => &self.pose,
            Channel::Hat => &self.hat,
        }
    }
}

impl<X> IndexMut<Channel> for PerChannel<X> {
    fn index_mut(&mut self, c: Channel) -> &mut X {
        match c {
            Channel::Face => &mut self.face,
            Channel::Pose => &mut self.pose,
            Channel::Hat => &mut self.hat,
        }
    }
}

/// Subset of channels enabled for a run; disabled channels are treated as
/// absent at every timestep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSet(pub [bool; 3]);

impl Default for ChannelSet {
    fn default() -> Self {
        ChannelSet([true; 3])
    }
}

impl ChannelSet {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn contains(&self, c: Channel) -> bool {
        self.0[c.index()]
    }

    pub fn is_empty(&self) -> bool {
        !self.0.iter().any(|&b| b)
    }
}

impl FromStr for ChannelSet {
    type Err = Error;

    /// Parses letters `f`, `p`, `c` (or channel names), separated by commas or
    /// run together: `"f,p"`, `"fpc"`, `"face,hat"`.
    fn from_str(s: &str) -> Result<Self, Error> {
        let mut set = [false; 3];
        let tokens: Vec<&str> = if s.contains(',') {
            s.split(',').map(str::trim).filter(|t| !t.is_empty()).collect()
        } else if Channel::ALL.iter().any(|c| c.name() == s.trim()) {
            vec![s.trim()]
        } else {
            s.trim().split("").filter(|t| !t.is_empty()).collect()
        };
        for t in tokens {
            let c = match t {
                "f" | "face" => Channel::Face,
                "p" | "pose" => Channel::Pose,
                "c" | "h" | "hat" => Channel::Hat,
                other => return Err(Error::InvalidArgument(format!("unknown channel {other:?}"))),
            };
            set[c.index()] = true;
        }
        let out = ChannelSet(set);
        if out.is_empty() {
            return Err(Error::InvalidArgument("empty channel set".into()));
        }
        Ok(out)
    }
}

impl fmt::Display for ChannelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let letters: Vec<&str> = Channel::ALL
            .iter()
            .zip(["f", "p", "c"])
            .filter(|(c, _)| self.contains(**c))
            .map(|(_, l)| l)
            .collect();
        f.write_str(&letters.join(","))
    }
}
