use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::MaskTargets;
use crate::error::{Error, Result};

/// A group of box components predicted together by one branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ComponentGroup {
    Xy,
    Alpha,
    Wh,
}

impl ComponentGroup {
    pub const ALL: [ComponentGroup; 3] = [
        ComponentGroup::Xy,
        ComponentGroup::Alpha,
        ComponentGroup::Wh,
    ];

    /// Positions in the `[dx, dy, dw, dh, dalpha]` layout.
    pub fn components(self) -> &'static [usize] {
        match self {
            ComponentGroup::Xy => &[0, 1],
            ComponentGroup::Alpha => &[4],
            ComponentGroup::Wh => &[2, 3],
        }
    }

    pub fn index(self) -> usize {
        match self {
            ComponentGroup::Xy => 0,
            ComponentGroup::Alpha => 1,
            ComponentGroup::Wh => 2,
        }
    }
}

impl fmt::Display for ComponentGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ComponentGroup::Xy => "xy",
            ComponentGroup::Alpha => "alpha",
            ComponentGroup::Wh => "wh",
        })
    }
}

impl FromStr for ComponentGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "xy" => Ok(ComponentGroup::Xy),
            "alpha" | "a" => Ok(ComponentGroup::Alpha),
            "wh" => Ok(ComponentGroup::Wh),
            other => Err(Error::Config(format!("unknown component group `{other}`"))),
        }
    }
}

/// Assignment of component groups to decoder stages 1–3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DecouplingOrder(pub [ComponentGroup; 3]);

impl DecouplingOrder {
    pub fn new(order: [ComponentGroup; 3]) -> Result<Self> {
        let o = Self(order);
        o.validate()?;
        Ok(o)
    }

    pub fn validate(&self) -> Result<()> {
        for g in ComponentGroup::ALL {
            if !self.0.contains(&g) {
                return Err(Error::Config(format!(
                    "decoupling order {self} is not a permutation"
                )));
            }
        }
        Ok(())
    }

    /// All six orders, the default first.
    pub fn all() -> Vec<DecouplingOrder> {
        use ComponentGroup::*;
        [
            [Xy, Alpha, Wh],
            [Xy, Wh, Alpha],
            [Wh, Xy, Alpha],
            [Wh, Alpha, Xy],
            [Alpha, Xy, Wh],
            [Alpha, Wh, Xy],
        ]
        .into_iter()
        .map(DecouplingOrder)
        .collect()
    }
}

impl Default for DecouplingOrder {
    fn default() -> Self {
        Self([
            ComponentGroup::Xy,
            ComponentGroup::Alpha,
            ComponentGroup::Wh,
        ])
    }
}

impl fmt::Display for DecouplingOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}>{}>{}", self.0[0], self.0[1], self.0[2])
    }
}

impl FromStr for DecouplingOrder {
    type Err = Error;

    /// Accepts `xy>alpha>wh` or `xy,alpha,wh`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(['>', ',']).collect();
        if parts.len() != 3 {
            return Err(Error::Config(format!(
                "decoupling order `{s}` needs three groups"
            )));
        }
        let groups = [parts[0].parse()?, parts[1].parse()?, parts[2].parse()?];
        Self::new(groups)
    }
}

/// How gradients treat the rasterised activation masks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MaskGradient {
    /// Masks are constants; no gradient reaches the branches that produced them.
    Detached,
    /// Forward uses the binary mask; backward uses the Jacobian of a
    /// sigmoid-edged relaxation with the given edge sharpness.
    StraightThrough { sharpness: f64 },
}

impl Default for MaskGradient {
    fn default() -> Self {
        MaskGradient::StraightThrough { sharpness: 10.0 }
    }
}

impl fmt::Display for MaskGradient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskGradient::Detached => f.write_str("detached"),
            MaskGradient::StraightThrough { sharpness } => {
                write!(f, "straight-through:{sharpness}")
            }
        }
    }
}

impl FromStr for MaskGradient {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "detached" => Ok(MaskGradient::Detached),
            "straight-through" => Ok(MaskGradient::default()),
            other => {
                let k = other
                    .strip_prefix("straight-through:")
                    .and_then(|k| k.parse::<f64>().ok())
                    .filter(|k| *k > 0.0 && k.is_finite())
                    .ok_or_else(|| Error::Config(format!("bad mask gradient `{other}`")))?;
                Ok(MaskGradient::StraightThrough { sharpness: k })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub decoupling_order: DecouplingOrder,
    /// 3×3 convolutions in the branch after decoder block 1, 2, 3.
    pub conv_counts: [usize; 3],
    pub class_convs: usize,
    /// Token grid side; the head sees `grid²` tokens.
    pub grid: usize,
    /// Width of a raw input token.
    pub token_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Foreground classes; logits carry one extra trailing background entry.
    pub num_classes: usize,
    pub mask_targets: MaskTargets,
    pub cam_enabled: bool,
    /// When set (1–4), a single branch at that block predicts all five components.
    pub coupled_stage: Option<usize>,
    pub mask_gradient: MaskGradient,
}

pub const BLOCKS: usize = 4;

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            decoupling_order: DecouplingOrder::default(),
            conv_counts: [3, 2, 1],
            class_convs: 0,
            grid: 7,
            token_dim: 16,
            d_model: 64,
            heads: 4,
            num_classes: 3,
            mask_targets: MaskTargets::V_ONLY,
            cam_enabled: true,
            coupled_stage: None,
            mask_gradient: MaskGradient::default(),
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        self.decoupling_order.validate()?;
        if self.grid == 0 || self.token_dim == 0 || self.num_classes == 0 {
            return Err(Error::Config(
                "grid, token_dim and num_classes must be positive".into(),
            ));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if let Some(s) = self.coupled_stage {
            if !(1..=BLOCKS).contains(&s) {
                return Err(Error::Config(format!(
                    "coupled_stage {s} outside 1..={BLOCKS}"
                )));
            }
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.grid * self.grid
    }

    /// Logit count including background.
    pub fn logits(&self) -> usize {
        self.num_classes + 1
    }

    pub fn background_label(&self) -> usize {
        self.num_classes
    }

    /// `key=value` pairs covering every field; inverse of [`HeadConfig::set`].
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let c = &self.conv_counts;
        vec![
            ("decoupling_order".into(), self.decoupling_order.to_string()),
            ("conv_counts".into(), format!("{},{},{}", c[0], c[1], c[2])),
            ("class_convs".into(), self.class_convs.to_string()),
            ("grid".into(), self.grid.to_string()),
            ("token_dim".into(), self.token_dim.to_string()),
            ("d_model".into(), self.d_model.to_string()),
            ("heads".into(), self.heads.to_string()),
            ("num_classes".into(), self.num_classes.to_string()),
            ("mask_targets".into(), self.mask_targets.to_string()),
            ("cam".into(), self.cam_enabled.to_string()),
            (
                "coupled_stage".into(),
                self.coupled_stage.map_or("none".into(), |s| s.to_string()),
            ),
            ("mask_gradient".into(), self.mask_gradient.to_string()),
        ]
    }

    /// Sets one field from its textual form. Returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let v = value.trim();
        let num = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::Config(format!("`{key}` expects an integer, got `{v}`")))
        };
        match key {
            "decoupling_order" => self.decoupling_order = v.parse()?,
            "conv_counts" => {
                let parts: Vec<usize> = v.split(',').map(num).collect::<Result<_>>()?;
                self.conv_counts = parts
                    .try_into()
                    .map_err(|_| Error::Config(format!("conv_counts `{v}` needs three entries")))?;
            }
            "class_convs" => self.class_convs = num(v)?,
            "grid" => self.grid = num(v)?,
            "token_dim" => self.token_dim = num(v)?,
            "d_model" => self.d_model = num(v)?,
            "heads" => self.heads = num(v)?,
            "num_classes" => self.num_classes = num(v)?,
            "mask_targets" => self.mask_targets = v.parse()?,
            "cam" => {
                self.cam_enabled = v
                    .parse()
                    .map_err(|_| Error::Config(format!("`cam` expects true/false, got `{v}`")))?
            }
            "coupled_stage" => {
                self.coupled_stage = match v {
                    "none" | "" => None,
                    s => Some(num(s)?),
                }
            }
            "mask_gradient" => self.mask_gradient = v.parse()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            if !cfg.set(k, v)? {
                return Err(Error::Config(format!("unknown head key `{k}`")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
