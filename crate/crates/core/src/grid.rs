//! Hybrid AC/MTDC network model.
//!
//! Files on disk use engineering units (MW, MVAr, kV, ohm, microsiemens);
//! everything held by [`NetworkModel`] is per-unit on `base_mva`. AC and DC
//! buses carry their own voltage base, from which impedance bases follow as
//! `kV^2 / MVA`. Converter loss coefficients and voltage quantities are
//! already per-unit in the file. The full schema is in `docs/network-schema.md`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const BUILTIN_FIXTURE: &str = include_str!("../data/four_terminal.json");

#[derive(Debug, Error)]
pub enum GridError {
    #[error("cannot read network file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed network file: {0}")]
    Parse(String),
    #[error("network failed validation: {}", format_violations(.0))]
    Validation(Vec<Violation>),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcBus {
    pub id: u32,
    pub name: String,
    pub base_kv: f64,
    pub p_load: f64,
    pub q_load: f64,
    pub gs: f64,
    pub bs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DcBus {
    pub id: u32,
    pub name: String,
    pub base_kv: f64,
}

/// AC branch as a pi-equivalent; `b` is the total line charging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub id: u32,
    pub from: u32,
    pub to: u32,
    pub r: f64,
    pub x: f64,
    pub b: f64,
    /// Thermal rating, used as a current limit at 1 p.u. voltage.
    pub rating: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DcBranch {
    pub id: u32,
    pub from: u32,
    pub to: u32,
    pub r: f64,
    pub rating: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConverterMode {
    DcSlack,
    ConstPq,
    AcVf,
    VoltageDroop,
}

/// Quadratic converter loss `a + b*|I| + c*|I|^2` with `I` the AC-side current.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossModel {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl LossModel {
    pub const DEFAULT: LossModel = LossModel { a: 0.011, b: 0.003, c: 0.004 };
    pub const LOSSLESS: LossModel = LossModel { a: 0.0, b: 0.0, c: 0.0 };
}

impl Default for LossModel {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// Local DC-voltage droop characteristic `P = p_ref - k (V_dc - v_ref)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DroopSetting {
    pub p_ref: f64,
    pub v_ref: f64,
    pub k: f64,
}

/// Voltage source converter. `p_set`/`q_set` are AC-side powers drawn from the
/// AC bus into the converter (positive = rectifier operation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Converter {
    pub id: u32,
    pub name: String,
    pub ac_bus: u32,
    pub dc_bus: u32,
    pub mode: ConverterMode,
    pub p_rating: f64,
    pub v_dc_min: f64,
    pub v_dc_max: f64,
    pub loss: LossModel,
    pub p_set: f64,
    pub q_set: f64,
    pub v_dc_set: f64,
    pub v_ac_set: f64,
    pub droop: Option<DroopSetting>,
}

/// Quadratic generation cost `c2 P^2 + c1 P + c0` with `P` in per-unit.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GenCost {
    pub c2: f64,
    pub c1: f64,
    pub c0: f64,
}

impl GenCost {
    pub fn eval(&self, p: f64) -> f64 {
        self.c2 * p * p + self.c1 * p + self.c0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub id: u32,
    pub bus: u32,
    /// Angle reference and balancing unit of its AC island.
    pub slack: bool,
    pub p_set: f64,
    pub v_set: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub cost: GenCost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindFarm {
    pub id: u32,
    pub name: String,
    pub bus: u32,
    pub p_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkModel {
    pub name: String,
    pub base_mva: f64,
    pub ac_buses: Vec<AcBus>,
    pub dc_buses: Vec<DcBus>,
    pub ac_branches: Vec<Branch>,
    pub dc_branches: Vec<DcBranch>,
    pub converters: Vec<Converter>,
    pub generators: Vec<Generator>,
    pub wind_farms: Vec<WindFarm>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ViolationCode {
    DuplicateId,
    DanglingReference,
    NonpositiveBase,
    NonpositiveImpedance,
    NonpositiveRating,
    MultipleDcSlack,
    MissingDcSlack,
    IslandWithoutReference,
    IslandMultipleReferences,
    MultipleVoltageControllers,
    NegativeDroopGain,
    DroopSettingMismatch,
    InvalidVoltageBand,
    InvalidGeneratorLimits,
}

impl ViolationCode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::DuplicateId => "duplicate-id",
            Self::DanglingReference => "dangling-reference",
            Self::NonpositiveBase => "nonpositive-base",
            Self::NonpositiveImpedance => "nonpositive-impedance",
            Self::NonpositiveRating => "nonpositive-rating",
            Self::MultipleDcSlack => "multiple-dc-slack",
            Self::MissingDcSlack => "missing-dc-slack",
            Self::IslandWithoutReference => "island-without-reference",
            Self::IslandMultipleReferences => "island-multiple-references",
            Self::MultipleVoltageControllers => "multiple-voltage-controllers",
            Self::NegativeDroopGain => "negative-droop-gain",
            Self::DroopSettingMismatch => "droop-setting-mismatch",
            Self::InvalidVoltageBand => "invalid-voltage-band",
            Self::InvalidGeneratorLimits => "invalid-generator-limits",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub code: ViolationCode,
    /// Element the violation is attached to, e.g. `ac_branch:7`.
    pub element: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}: {}", self.code.as_str(), self.element, self.message)
    }
}

impl NetworkModel {
    pub fn ac_bus_index(&self, id: u32) -> Option<usize> {
        self.ac_buses.iter().position(|b| b.id == id)
    }

    pub fn dc_bus_index(&self, id: u32) -> Option<usize> {
        self.dc_buses.iter().position(|b| b.id == id)
    }

    pub fn converter_index(&self, id: u32) -> Option<usize> {
        self.converters.iter().position(|c| c.id == id)
    }

    pub fn generator_index(&self, id: u32) -> Option<usize> {
        self.generators.iter().position(|g| g.id == id)
    }

    /// Index of the converter holding the DC voltage reference.
    pub fn dc_slack_converter(&self) -> Option<usize> {
        self.converters.iter().position(|c| c.mode == ConverterMode::DcSlack)
    }

    /// Converters eligible for DC-voltage droop (mode `VoltageDroop`).
    pub fn droop_converters(&self) -> Vec<usize> {
        self.converters
            .iter()
            .enumerate()
            .filter(|(_, c)| c.mode == ConverterMode::VoltageDroop)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn total_load(&self) -> f64 {
        self.ac_buses.iter().map(|b| b.p_load).sum()
    }

    pub fn mw_to_pu(&self, mw: f64) -> f64 {
        mw / self.base_mva
    }

    pub fn pu_to_mw(&self, pu: f64) -> f64 {
        pu * self.base_mva
    }

    /// Returns a copy with every converter loss coefficient zeroed.
    pub fn lossless(&self) -> NetworkModel {
        let mut m = self.clone();
        for c in &mut m.converters {
            c.loss = LossModel::LOSSLESS;
        }
        m
    }

    /// Groups AC bus indices into islands connected through AC branches.
    pub fn ac_islands(&self) -> Vec<Vec<usize>> {
        let n = self.ac_buses.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        for br in &self.ac_branches {
            if let (Some(a), Some(b)) = (self.ac_bus_index(br.from), self.ac_bus_index(br.to)) {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                if ra != rb {
                    parent[ra] = rb;
                }
            }
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for i in 0..n {
            let r = find(&mut parent, i);
            groups.entry(r).or_default().push(i);
        }
        let mut out: Vec<Vec<usize>> = groups.into_values().collect();
        out.sort_by_key(|g| g[0]);
        out
    }
}

/// Checks every structural invariant. Violations are returned as data.
pub fn validate(model: &NetworkModel) -> Vec<Violation> {
    let mut out = Vec::new();
    fn push(out: &mut Vec<Violation>, code: ViolationCode, element: String, message: String) {
        out.push(Violation { code, element, message });
    }

    if !(model.base_mva > 0.0) {
        push(&mut out, ViolationCode::NonpositiveBase, "network".into(), format!("base_mva = {}", model.base_mva));
    }

    fn dupes<'a>(ids: impl Iterator<Item = u32>) -> Vec<u32> {
        let mut seen = BTreeSet::new();
        let mut d = Vec::new();
        for id in ids {
            if !seen.insert(id) {
                d.push(id);
            }
        }
        d
    }
    for (kind, d) in [
        ("ac_bus", dupes(model.ac_buses.iter().map(|b| b.id))),
        ("dc_bus", dupes(model.dc_buses.iter().map(|b| b.id))),
        ("ac_branch", dupes(model.ac_branches.iter().map(|b| b.id))),
        ("dc_branch", dupes(model.dc_branches.iter().map(|b| b.id))),
        ("converter", dupes(model.converters.iter().map(|c| c.id))),
        ("generator", dupes(model.generators.iter().map(|g| g.id))),
        ("wind_farm", dupes(model.wind_farms.iter().map(|w| w.id))),
    ] {
        for id in d {
            push(&mut out, ViolationCode::DuplicateId, format!("{kind}:{id}"), "id used more than once".into());
        }
    }

    for b in &model.ac_buses {
        if !(b.base_kv > 0.0) {
            push(&mut out, ViolationCode::NonpositiveBase, format!("ac_bus:{}", b.id), format!("base_kv = {}", b.base_kv));
        }
    }
    for b in &model.dc_buses {
        if !(b.base_kv > 0.0) {
            push(&mut out, ViolationCode::NonpositiveBase, format!("dc_bus:{}", b.id), format!("base_kv = {}", b.base_kv));
        }
    }

    let ac_ids: BTreeSet<u32> = model.ac_buses.iter().map(|b| b.id).collect();
    let dc_ids: BTreeSet<u32> = model.dc_buses.iter().map(|b| b.id).collect();

    for br in &model.ac_branches {
        let el = format!("ac_branch:{}", br.id);
        for end in [br.from, br.to] {
            if !ac_ids.contains(&end) {
                push(&mut out, ViolationCode::DanglingReference, el.clone(), format!("AC bus {end} does not exist"));
            }
        }
        // transformer branches legitimately have zero resistance
        if br.r < 0.0 || !(br.x > 0.0) {
            push(&mut out, ViolationCode::NonpositiveImpedance, el.clone(), format!("r = {}, x = {}", br.r, br.x));
        }
        if !(br.rating > 0.0) {
            push(&mut out, ViolationCode::NonpositiveRating, el, format!("rating = {}", br.rating));
        }
    }
    for br in &model.dc_branches {
        let el = format!("dc_branch:{}", br.id);
        for end in [br.from, br.to] {
            if !dc_ids.contains(&end) {
                push(&mut out, ViolationCode::DanglingReference, el.clone(), format!("DC bus {end} does not exist"));
            }
        }
        if !(br.r > 0.0) {
            push(&mut out, ViolationCode::NonpositiveImpedance, el.clone(), format!("r = {}", br.r));
        }
        if !(br.rating > 0.0) {
            push(&mut out, ViolationCode::NonpositiveRating, el, format!("rating = {}", br.rating));
        }
    }

    let mut dc_slacks = Vec::new();
    for c in &model.converters {
        let el = format!("converter:{}", c.id);
        if !ac_ids.contains(&c.ac_bus) {
            push(&mut out, ViolationCode::DanglingReference, el.clone(), format!("AC bus {} does not exist", c.ac_bus));
        }
        if !dc_ids.contains(&c.dc_bus) {
            push(&mut out, ViolationCode::DanglingReference, el.clone(), format!("DC bus {} does not exist", c.dc_bus));
        }
        if !(c.p_rating > 0.0) {
            push(&mut out, ViolationCode::NonpositiveRating, el.clone(), format!("p_rating = {}", c.p_rating));
        }
        if !(c.v_dc_min < c.v_dc_max) || !(c.v_dc_min > 0.0) {
            push(
                &mut out,
                ViolationCode::InvalidVoltageBand,
                el.clone(),
                format!("v_dc_min = {}, v_dc_max = {}", c.v_dc_min, c.v_dc_max),
            );
        }
        match (c.mode, &c.droop) {
            (ConverterMode::VoltageDroop, Some(d)) => {
                if d.k < 0.0 {
                    push(&mut out, ViolationCode::NegativeDroopGain, el.clone(), format!("k = {}", d.k));
                }
            }
            (ConverterMode::VoltageDroop, None) => {
                push(&mut out, ViolationCode::DroopSettingMismatch, el.clone(), "droop mode without droop setting".into());
            }
            (_, Some(_)) => {
                push(&mut out, ViolationCode::DroopSettingMismatch, el.clone(), "droop setting on a non-droop converter".into());
            }
            (_, None) => {}
        }
        if c.mode == ConverterMode::DcSlack {
            dc_slacks.push(c.id);
        }
    }
    match dc_slacks.len() {
        0 => push(&mut out, ViolationCode::MissingDcSlack, "network".into(), "no converter in DC-slack mode".into()),
        1 => {}
        _ => push(
            &mut out,
            ViolationCode::MultipleDcSlack,
            format!("converter:{}", dc_slacks[1]),
            format!("converters {:?} are all in DC-slack mode", dc_slacks),
        ),
    }

    let mut controllers: HashMap<u32, usize> = HashMap::new();
    for g in &model.generators {
        let el = format!("generator:{}", g.id);
        if !ac_ids.contains(&g.bus) {
            push(&mut out, ViolationCode::DanglingReference, el.clone(), format!("AC bus {} does not exist", g.bus));
        }
        if g.p_min > g.p_max {
            push(&mut out, ViolationCode::InvalidGeneratorLimits, el, format!("p_min {} > p_max {}", g.p_min, g.p_max));
        }
        *controllers.entry(g.bus).or_default() += 1;
    }
    for c in model.converters.iter().filter(|c| c.mode == ConverterMode::AcVf) {
        *controllers.entry(c.ac_bus).or_default() += 1;
    }
    for (bus, n) in controllers {
        if n > 1 {
            push(
                &mut out,
                ViolationCode::MultipleVoltageControllers,
                format!("ac_bus:{bus}"),
                format!("{n} voltage-controlling devices on one bus"),
            );
        }
    }

    for w in &model.wind_farms {
        let el = format!("wind_farm:{}", w.id);
        if !ac_ids.contains(&w.bus) {
            push(&mut out, ViolationCode::DanglingReference, el.clone(), format!("AC bus {} does not exist", w.bus));
        }
        if !(w.p_max > 0.0) {
            push(&mut out, ViolationCode::NonpositiveRating, el, format!("p_max = {}", w.p_max));
        }
    }

    // islands are only meaningful once references resolve
    if out.iter().all(|v| v.code != ViolationCode::DanglingReference) {
        for island in model.ac_islands() {
            let ids: BTreeSet<u32> = island.iter().map(|&i| model.ac_buses[i].id).collect();
            let refs = model.generators.iter().filter(|g| g.slack && ids.contains(&g.bus)).count()
                + model
                    .converters
                    .iter()
                    .filter(|c| c.mode == ConverterMode::AcVf && ids.contains(&c.ac_bus))
                    .count();
            let first = *ids.iter().next().unwrap();
            match refs {
                1 => {}
                0 => push(
                    &mut out,
                    ViolationCode::IslandWithoutReference,
                    format!("ac_bus:{first}"),
                    format!("AC island {:?} has no slack generator or AC-Vf converter", ids),
                ),
                n => push(
                    &mut out,
                    ViolationCode::IslandMultipleReferences,
                    format!("ac_bus:{first}"),
                    format!("AC island {:?} has {n} angle references", ids),
                ),
            }
        }
    }

    out
}

// ---------------------------------------------------------------------------
// file schema (engineering units)

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkFile {
    #[serde(default)]
    name: String,
    base_mva: f64,
    ac_buses: Vec<AcBusFile>,
    dc_buses: Vec<DcBusFile>,
    ac_branches: Vec<BranchFile>,
    dc_branches: Vec<DcBranchFile>,
    converters: Vec<ConverterFile>,
    generators: Vec<GeneratorFile>,
    wind_farms: Vec<WindFarmFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AcBusFile {
    id: u32,
    #[serde(default)]
    name: String,
    base_kv: f64,
    #[serde(default)]
    p_load_mw: f64,
    #[serde(default)]
    q_load_mvar: f64,
    #[serde(default)]
    gs_mw: f64,
    #[serde(default)]
    bs_mvar: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DcBusFile {
    id: u32,
    #[serde(default)]
    name: String,
    base_kv: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BranchFile {
    id: u32,
    from: u32,
    to: u32,
    r_ohm: f64,
    x_ohm: f64,
    #[serde(default)]
    b_us: f64,
    rating_mva: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DcBranchFile {
    id: u32,
    from: u32,
    to: u32,
    r_ohm: f64,
    rating_mw: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DroopFile {
    p_ref_mw: f64,
    v_ref: f64,
    k: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConverterFile {
    id: u32,
    #[serde(default)]
    name: String,
    ac_bus: u32,
    dc_bus: u32,
    mode: ConverterMode,
    p_rating_mw: f64,
    v_dc_min: f64,
    v_dc_max: f64,
    #[serde(default)]
    loss: LossModel,
    #[serde(default)]
    p_set_mw: f64,
    #[serde(default)]
    q_set_mvar: f64,
    #[serde(default = "one")]
    v_dc_set: f64,
    #[serde(default = "one")]
    v_ac_set: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    droop: Option<DroopFile>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CostFile {
    /// $/MW^2h
    c2: f64,
    /// $/MWh
    c1: f64,
    /// $/h
    c0: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeneratorFile {
    id: u32,
    bus: u32,
    #[serde(default)]
    slack: bool,
    p_set_mw: f64,
    v_set: f64,
    p_min_mw: f64,
    p_max_mw: f64,
    #[serde(default)]
    q_min_mvar: f64,
    #[serde(default)]
    q_max_mvar: f64,
    cost: CostFile,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WindFarmFile {
    id: u32,
    #[serde(default)]
    name: String,
    bus: u32,
    p_max_mw: f64,
}

fn z_base(kv: f64, mva: f64) -> f64 {
    kv * kv / mva
}

impl NetworkFile {
    fn into_model(self) -> Result<NetworkModel, GridError> {
        let s = self.base_mva;
        if !(s > 0.0) {
            return Err(GridError::Validation(vec![Violation {
                code: ViolationCode::NonpositiveBase,
                element: "network".into(),
                message: format!("base_mva = {s}"),
            }]));
        }
        let ac_kv: HashMap<u32, f64> = self.ac_buses.iter().map(|b| (b.id, b.base_kv)).collect();
        let dc_kv: HashMap<u32, f64> = self.dc_buses.iter().map(|b| (b.id, b.base_kv)).collect();
        // dangling ends keep a NaN impedance base; validation reports them
        let ac_zb = |bus: u32| ac_kv.get(&bus).map(|kv| z_base(*kv, s)).unwrap_or(f64::NAN);
        let dc_zb = |bus: u32| dc_kv.get(&bus).map(|kv| z_base(*kv, s)).unwrap_or(f64::NAN);

        Ok(NetworkModel {
            name: self.name,
            base_mva: s,
            ac_buses: self
                .ac_buses
                .into_iter()
                .map(|b| AcBus {
                    id: b.id,
                    name: b.name,
                    base_kv: b.base_kv,
                    p_load: b.p_load_mw / s,
                    q_load: b.q_load_mvar / s,
                    gs: b.gs_mw / s,
                    bs: b.bs_mvar / s,
                })
                .collect(),
            dc_buses: self
                .dc_buses
                .into_iter()
                .map(|b| DcBus { id: b.id, name: b.name, base_kv: b.base_kv })
                .collect(),
            ac_branches: self
                .ac_branches
                .into_iter()
                .map(|b| {
                    let zb = if ac_kv.contains_key(&b.from) { ac_zb(b.from) } else { ac_zb(b.to) };
                    Branch {
                        id: b.id,
                        from: b.from,
                        to: b.to,
                        r: b.r_ohm / zb,
                        x: b.x_ohm / zb,
                        b: b.b_us * 1e-6 * zb,
                        rating: b.rating_mva / s,
                    }
                })
                .collect(),
            dc_branches: self
                .dc_branches
                .into_iter()
                .map(|b| {
                    let zb = if dc_kv.contains_key(&b.from) { dc_zb(b.from) } else { dc_zb(b.to) };
                    DcBranch { id: b.id, from: b.from, to: b.to, r: b.r_ohm / zb, rating: b.rating_mw / s }
                })
                .collect(),
            converters: self
                .converters
                .into_iter()
                .map(|c| Converter {
                    id: c.id,
                    name: c.name,
                    ac_bus: c.ac_bus,
                    dc_bus: c.dc_bus,
                    mode: c.mode,
                    p_rating: c.p_rating_mw / s,
                    v_dc_min: c.v_dc_min,
                    v_dc_max: c.v_dc_max,
                    loss: c.loss,
                    p_set: c.p_set_mw / s,
                    q_set: c.q_set_mvar / s,
                    v_dc_set: c.v_dc_set,
                    v_ac_set: c.v_ac_set,
                    droop: c.droop.map(|d| DroopSetting { p_ref: d.p_ref_mw / s, v_ref: d.v_ref, k: d.k }),
                })
                .collect(),
            generators: self
                .generators
                .into_iter()
                .map(|g| Generator {
                    id: g.id,
                    bus: g.bus,
                    slack: g.slack,
                    p_set: g.p_set_mw / s,
                    v_set: g.v_set,
                    p_min: g.p_min_mw / s,
                    p_max: g.p_max_mw / s,
                    q_min: g.q_min_mvar / s,
                    q_max: g.q_max_mvar / s,
                    cost: GenCost { c2: g.cost.c2 * s * s, c1: g.cost.c1 * s, c0: g.cost.c0 },
                })
                .collect(),
            wind_farms: self
                .wind_farms
                .into_iter()
                .map(|w| WindFarm { id: w.id, name: w.name, bus: w.bus, p_max: w.p_max_mw / s })
                .collect(),
        })
    }

    fn from_model(m: &NetworkModel) -> NetworkFile {
        let s = m.base_mva;
        let ac_zb = |bus: u32| {
            m.ac_buses.iter().find(|b| b.id == bus).map(|b| z_base(b.base_kv, s)).unwrap_or(f64::NAN)
        };
        let dc_zb = |bus: u32| {
            m.dc_buses.iter().find(|b| b.id == bus).map(|b| z_base(b.base_kv, s)).unwrap_or(f64::NAN)
        };
        NetworkFile {
            name: m.name.clone(),
            base_mva: s,
            ac_buses: m
                .ac_buses
                .iter()
                .map(|b| AcBusFile {
                    id: b.id,
                    name: b.name.clone(),
                    base_kv: b.base_kv,
                    p_load_mw: b.p_load * s,
                    q_load_mvar: b.q_load * s,
                    gs_mw: b.gs * s,
                    bs_mvar: b.bs * s,
                })
                .collect(),
            dc_buses: m
                .dc_buses
                .iter()
                .map(|b| DcBusFile { id: b.id, name: b.name.clone(), base_kv: b.base_kv })
                .collect(),
            ac_branches: m
                .ac_branches
                .iter()
                .map(|b| {
                    let zb = ac_zb(b.from);
                    BranchFile {
                        id: b.id,
                        from: b.from,
                        to: b.to,
                        r_ohm: b.r * zb,
                        x_ohm: b.x * zb,
                        b_us: b.b / zb * 1e6,
                        rating_mva: b.rating * s,
                    }
                })
                .collect(),
            dc_branches: m
                .dc_branches
                .iter()
                .map(|b| DcBranchFile {
                    id: b.id,
                    from: b.from,
                    to: b.to,
                    r_ohm: b.r * dc_zb(b.from),
                    rating_mw: b.rating * s,
                })
                .collect(),
            converters: m
                .converters
                .iter()
                .map(|c| ConverterFile {
                    id: c.id,
                    name: c.name.clone(),
                    ac_bus: c.ac_bus,
                    dc_bus: c.dc_bus,
                    mode: c.mode,
                    p_rating_mw: c.p_rating * s,
                    v_dc_min: c.v_dc_min,
                    v_dc_max: c.v_dc_max,
                    loss: c.loss,
                    p_set_mw: c.p_set * s,
                    q_set_mvar: c.q_set * s,
                    v_dc_set: c.v_dc_set,
                    v_ac_set: c.v_ac_set,
                    droop: c.droop.map(|d| DroopFile { p_ref_mw: d.p_ref * s, v_ref: d.v_ref, k: d.k }),
                })
                .collect(),
            generators: m
                .generators
                .iter()
                .map(|g| GeneratorFile {
                    id: g.id,
                    bus: g.bus,
                    slack: g.slack,
                    p_set_mw: g.p_set * s,
                    v_set: g.v_set,
                    p_min_mw: g.p_min * s,
                    p_max_mw: g.p_max * s,
                    q_min_mvar: g.q_min * s,
                    q_max_mvar: g.q_max * s,
                    cost: CostFile { c2: g.cost.c2 / (s * s), c1: g.cost.c1 / s, c0: g.cost.c0 },
                })
                .collect(),
            wind_farms: m
                .wind_farms
                .iter()
                .map(|w| WindFarmFile { id: w.id, name: w.name.clone(), bus: w.bus, p_max_mw: w.p_max * s })
                .collect(),
        }
    }
}

/// Parses a network document and validates it.
pub fn parse_network(text: &str) -> Result<NetworkModel, GridError> {
    if text.trim().is_empty() {
        return Err(GridError::Parse("empty document".into()));
    }
    let file: NetworkFile = serde_json::from_str(text).map_err(|e| GridError::Parse(e.to_string()))?;
    let model = file.into_model()?;
    let violations = validate(&model);
    if violations.is_empty() {
        Ok(model)
    } else {
        Err(GridError::Validation(violations))
    }
}

pub fn load_network(path: impl AsRef<Path>) -> Result<NetworkModel, GridError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|source| GridError::Io { path: path.display().to_string(), source })?;
    parse_network(&text)
}

/// Serializes the model back into the engineering-unit file schema.
pub fn to_json(model: &NetworkModel) -> String {
    serde_json::to_string_pretty(&NetworkFile::from_model(model)).expect("network serializes")
}

pub fn save_network(model: &NetworkModel, path: impl AsRef<Path>) -> Result<(), GridError> {
    let path = path.as_ref();
    std::fs::write(path, to_json(model))
        .map_err(|source| GridError::Io { path: path.display().to_string(), source })
}

/// The shipped 4-terminal hybrid AC/MTDC fixture.
///
/// Two IEEE 9-bus systems (scaled tenfold onto a 1000 MVA base) connect to
/// the DC grid through VSC1 (DC slack) and VSC4 (droop). Two offshore wind
/// farms of 1970.7 MW sit behind the AC-Vf collector stations VSC2 and VSC3.
pub fn builtin_testcase() -> NetworkModel {
    parse_network(BUILTIN_FIXTURE).expect("builtin fixture is valid")
}

/// Raw text of the shipped fixture file.
pub fn builtin_fixture_text() -> &'static str {
    BUILTIN_FIXTURE
}
