use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Which part of the network a parameter belongs to. Freezing is decided per
/// group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    PhonemeEncoder,
    Decoder,
    StyleEncoder,
    SpeakerEncoder,
    EmotionEncoder,
    ProsodyEncoder,
    ProsodyPredictor,
    DurationPredictor,
    PitchPredictor,
    PitchEncoder,
    EnergyPredictor,
    EnergyEncoder,
    Tables,
}

impl Group {
    pub const ALL: [Group; 13] = [
        Group::PhonemeEncoder,
        Group::Decoder,
        Group::StyleEncoder,
        Group::SpeakerEncoder,
        Group::EmotionEncoder,
        Group::ProsodyEncoder,
        Group::ProsodyPredictor,
        Group::DurationPredictor,
        Group::PitchPredictor,
        Group::PitchEncoder,
        Group::EnergyPredictor,
        Group::EnergyEncoder,
        Group::Tables,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::PhonemeEncoder => "phoneme_encoder",
            Group::Decoder => "decoder",
            Group::StyleEncoder => "style_encoder",
            Group::SpeakerEncoder => "speaker_encoder",
            Group::EmotionEncoder => "emotion_encoder",
            Group::ProsodyEncoder => "prosody_encoder",
            Group::ProsodyPredictor => "prosody_predictor",
            Group::DurationPredictor => "duration_predictor",
            Group::PitchPredictor => "pitch_predictor",
            Group::PitchEncoder => "pitch_encoder",
            Group::EnergyPredictor => "energy_predictor",
            Group::EnergyEncoder => "energy_encoder",
            Group::Tables => "tables",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Group::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown parameter group {s:?}")))
    }
}

/// Weights are optimized; buffers (running statistics) are updated outside
/// the gradient path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Buffer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub kind: ParamKind,
    pub frozen: bool,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: &str, group: Group, kind: ParamKind, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter name {name:?}")));
        }
        let id = self.params.len();
        self.index.insert(name.to_string(), id);
        self.params.push(Param {
            name: name.to_string(),
            group,
            kind,
            frozen: false,
            value,
        });
        Ok(ParamId(id))
    }

    pub fn add(&mut self, name: &str, group: Group, value: Tensor) -> Result<ParamId> {
        self.insert(name, group, ParamKind::Weight, value)
    }

    pub fn add_buffer(&mut self, name: &str, group: Group, value: Tensor) -> Result<ParamId> {
        self.insert(name, group, ParamKind::Buffer, value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Replaces a value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::Shape {
                op: "ParameterStore::set",
                lhs: p.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    /// Freezes every parameter of the listed groups and unfreezes the rest.
    pub fn freeze_only(&mut self, groups: &[Group]) {
        for p in &mut self.params {
            p.frozen = groups.contains(&p.group);
        }
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        let p = &self.params[id.0];
        p.kind == ParamKind::Weight && !p.frozen
    }

    /// Number of scalar weights (buffers excluded).
    pub fn weight_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Weight)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn group_count(&self, group: Group) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Weight && p.group == group)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Places every parameter on `tape`. Only trainable weights are
    /// differentiable leaves.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| tape.leaf(p.value.clone(), self.is_trainable(ParamId(i))))
            .collect();
        Bound { vars }
    }
}

/// Tape handles for every parameter of a store.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Routes parameter `id` to another tape variable of the same shape,
    /// e.g. a leaf under gradient check.
    pub fn replace(&mut self, id: ParamId, v: Var) {
        self.vars[id.0] = v;
    }
}
