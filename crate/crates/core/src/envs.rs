//! Miniature token-action environments.
//!
//! * `HallwayNav`: a 1 x N corridor, agent at cell 0, goal at the far end.
//! * `RoomsNav`: a walled square room (`OneRoom`) or two rooms joined by a
//!   gap in an interior wall (`WallGap`).
//! * `CardPoints`: combine visible cards to hit a target value.
//! * `TinyShop`: filter a small catalogue, select the requested item, buy.
//!
//! Navigation is egocentric (turn/forward) over an allocentric one-hot grid
//! in which the agent's cell encodes its heading.

use std::collections::{HashSet, VecDeque};
use std::fmt;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{ActionEmission, ObsDims, Observation, Vocabulary, EOS, SEP};

/// Penalty for an emission that does not parse into a command.
pub const PARSE_PENALTY: f64 = -0.01;

/// Thought tokens available in every vocabulary.
pub const THOUGHT_TOKENS: [&str; 4] = ["t0", "t1", "t2", "t3"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid environment spec: {0}")]
    Spec(String),
    #[error("step called on a finished episode")]
    EpisodeDone,
    #[error("step called before reset")]
    NotReset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    HallwayNav,
    RoomsNav,
    CardPoints,
    TinyShop,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::HallwayNav => "hallway_nav",
            EnvKind::RoomsNav => "rooms_nav",
            EnvKind::CardPoints => "card_points",
            EnvKind::TinyShop => "tiny_shop",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "hallway_nav" => Some(EnvKind::HallwayNav),
            "rooms_nav" => Some(EnvKind::RoomsNav),
            "card_points" => Some(EnvKind::CardPoints),
            "tiny_shop" => Some(EnvKind::TinyShop),
            _ => None,
        }
    }

    pub fn is_navigation(self) -> bool {
        matches!(self, EnvKind::HallwayNav | EnvKind::RoomsNav)
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoomsLayout {
    OneRoom,
    WallGap,
}

impl RoomsLayout {
    pub fn name(self) -> &'static str {
        match self {
            RoomsLayout::OneRoom => "one_room",
            RoomsLayout::WallGap => "wall_gap",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "one_room" => Some(RoomsLayout::OneRoom),
            "wall_gap" => Some(RoomsLayout::WallGap),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardScheme {
    /// +1 on success, 0 otherwise.
    SparseTerminal,
    /// Sparse reward plus -1/T every step.
    Shaped,
}

impl RewardScheme {
    pub fn name(self) -> &'static str {
        match self {
            RewardScheme::SparseTerminal => "sparse_terminal",
            RewardScheme::Shaped => "shaped",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sparse_terminal" => Some(RewardScheme::SparseTerminal),
            "shaped" => Some(RewardScheme::Shaped),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub kind: EnvKind,
    /// Grid height (RoomsNav side, including border walls; 1 for hallways).
    pub height: usize,
    /// Grid width (hallway length for HallwayNav).
    pub width: usize,
    pub layout: RoomsLayout,
    pub horizon: usize,
    pub frame_stack: usize,
    pub reward: RewardScheme,
    /// When set, cells farther than `view_radius` (Chebyshev) are masked.
    pub partial_obs: bool,
    pub view_radius: usize,
    /// Randomize the initial heading in HallwayNav. Off by default: the agent
    /// starts at cell 0 facing the goal. Seed 0 always faces the goal.
    pub random_heading: bool,
    pub num_cards: usize,
    pub max_card: usize,
    pub num_items: usize,
    pub seed: u64,
}

impl EnvSpec {
    pub fn defaults(kind: EnvKind) -> Self {
        let base = EnvSpec {
            kind,
            height: 1,
            width: 8,
            layout: RoomsLayout::OneRoom,
            horizon: 20,
            frame_stack: 4,
            reward: RewardScheme::SparseTerminal,
            partial_obs: false,
            view_radius: 2,
            random_heading: false,
            num_cards: 3,
            max_card: 9,
            num_items: 6,
            seed: 0,
        };
        match kind {
            EnvKind::HallwayNav => base,
            EnvKind::RoomsNav => EnvSpec {
                height: 7,
                width: 7,
                horizon: 40,
                ..base
            },
            EnvKind::CardPoints => EnvSpec {
                height: 1,
                width: 3,
                horizon: 6,
                ..base
            },
            EnvKind::TinyShop => EnvSpec {
                height: 4,
                width: 6,
                horizon: 8,
                ..base
            },
        }
    }

    pub fn hallway(length: usize) -> Self {
        EnvSpec {
            width: length,
            ..Self::defaults(EnvKind::HallwayNav)
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::Spec(m));
        if self.horizon < 1 {
            return bad("horizon must be >= 1".into());
        }
        if self.frame_stack < 1 {
            return bad("frame_stack must be >= 1".into());
        }
        match self.kind {
            EnvKind::HallwayNav => {
                if self.height != 1 || self.width < 2 {
                    return bad(format!(
                        "hallway must be 1 x N with N >= 2, got {} x {}",
                        self.height, self.width
                    ));
                }
            }
            EnvKind::RoomsNav => {
                let min = match self.layout {
                    RoomsLayout::OneRoom => 4,
                    RoomsLayout::WallGap => 5,
                };
                if self.height < min || self.width < min {
                    return bad(format!("rooms grid must be at least {min} x {min}"));
                }
            }
            EnvKind::CardPoints => {
                if self.num_cards < 1 || self.num_cards > 9 || !(1..=9).contains(&self.max_card) {
                    return bad("card_points needs 1..=9 cards with values in 1..=9".into());
                }
                if self.height != 1 || self.width != self.num_cards {
                    return bad("card_points grid must be 1 x num_cards".into());
                }
            }
            EnvKind::TinyShop => {
                if !(1..=SHOP_MAX_ITEMS).contains(&self.num_items) {
                    return bad(format!("tiny_shop supports 1..={SHOP_MAX_ITEMS} items"));
                }
                if self.height != 4 || self.width != self.num_items {
                    return bad("tiny_shop grid must be 4 x num_items".into());
                }
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        match self.kind {
            EnvKind::HallwayNav | EnvKind::RoomsNav => NAV_CHANNELS,
            EnvKind::CardPoints => 2 * self.max_card,
            EnvKind::TinyShop => SHOP_CHANNELS,
        }
    }

    pub fn obs_dims(&self) -> ObsDims {
        ObsDims {
            frames: self.frame_stack,
            channels: self.channels(),
            height: self.height,
            width: self.width,
        }
    }

    /// Token inventory for this environment kind.
    pub fn vocabulary(&self) -> Vocabulary {
        let mut extra: Vec<String> = THOUGHT_TOKENS.iter().map(|s| s.to_string()).collect();
        extra.extend(self.action_tokens());
        extra.extend(self.context_only_tokens());
        Vocabulary::new(&extra).expect("static vocabulary is duplicate-free")
    }

    /// Single-token commands, in the order used by [`EnvAction`] decoding.
    pub fn action_tokens(&self) -> Vec<String> {
        match self.kind {
            EnvKind::HallwayNav | EnvKind::RoomsNav => ["forward", "turn_left", "turn_right"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            EnvKind::CardPoints => {
                let mut v: Vec<String> = (0..self.num_cards).map(|i| format!("pick{i}")).collect();
                v.extend(["plus", "times", "submit"].iter().map(|s| s.to_string()));
                v
            }
            EnvKind::TinyShop => {
                let mut v: Vec<String> = SHOP_ATTRS
                    .iter()
                    .flat_map(|g| g.iter())
                    .map(|a| format!("search_{a}"))
                    .collect();
                v.extend((0..self.num_items).map(|i| format!("click{i}")));
                v.push("buy".into());
                v
            }
        }
    }

    fn context_only_tokens(&self) -> Vec<String> {
        match self.kind {
            EnvKind::HallwayNav | EnvKind::RoomsNav => {
                ["go", "to", "goal"].iter().map(|s| s.to_string()).collect()
            }
            EnvKind::CardPoints => {
                let mut v: Vec<String> = ["target", "total", "op"].iter().map(|s| s.to_string()).collect();
                v.extend((0..10).map(|d| format!("d{d}")));
                v
            }
            EnvKind::TinyShop => {
                let mut v = vec!["want".to_string()];
                v.extend(SHOP_ATTRS.iter().flat_map(|g| g.iter()).map(|a| a.to_string()));
                v
            }
        }
    }
}

/// Parsed environment command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnvAction {
    TurnLeft,
    TurnRight,
    Forward,
    Pick(usize),
    Plus,
    Times,
    Submit,
    /// Index into the flattened attribute table (`SHOP_ATTRS`).
    Search(usize),
    Click(usize),
    Buy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParseFailure {
    MissingSeparator,
    RepeatedSeparator,
    EmptyActionSpan,
    OutsideGrammar,
}

/// Reads only the action span (after SEP, up to EOS) of an emission.
pub fn parse_action(tokens: &[usize], vocab: &Vocabulary, spec: &EnvSpec) -> Result<EnvAction, ParseFailure> {
    let (_, action) = ActionEmission::spans(tokens);
    if action.start > tokens.len() || (action.is_empty() && !tokens[1..].contains(&SEP)) {
        return Err(ParseFailure::MissingSeparator);
    }
    let mut span: &[usize] = &tokens[action];
    if let Some(p) = span.iter().position(|&t| t == EOS) {
        span = &span[..p];
    }
    if span.contains(&SEP) {
        return Err(ParseFailure::RepeatedSeparator);
    }
    match span {
        [] => Err(ParseFailure::EmptyActionSpan),
        [tok] => {
            let text = vocab.token(*tok).ok_or(ParseFailure::OutsideGrammar)?;
            command_from_token(text, spec).ok_or(ParseFailure::OutsideGrammar)
        }
        _ => Err(ParseFailure::OutsideGrammar),
    }
}

fn command_from_token(text: &str, spec: &EnvSpec) -> Option<EnvAction> {
    match spec.kind {
        EnvKind::HallwayNav | EnvKind::RoomsNav => match text {
            "forward" => Some(EnvAction::Forward),
            "turn_left" => Some(EnvAction::TurnLeft),
            "turn_right" => Some(EnvAction::TurnRight),
            _ => None,
        },
        EnvKind::CardPoints => match text {
            "plus" => Some(EnvAction::Plus),
            "times" => Some(EnvAction::Times),
            "submit" => Some(EnvAction::Submit),
            _ => {
                let i: usize = text.strip_prefix("pick")?.parse().ok()?;
                (i < spec.num_cards).then_some(EnvAction::Pick(i))
            }
        },
        EnvKind::TinyShop => {
            if text == "buy" {
                return Some(EnvAction::Buy);
            }
            if let Some(a) = text.strip_prefix("search_") {
                return SHOP_ATTRS
                    .iter()
                    .flat_map(|g| g.iter())
                    .position(|x| *x == a)
                    .map(EnvAction::Search);
            }
            let i: usize = text.strip_prefix("click")?.parse().ok()?;
            (i < spec.num_items).then_some(EnvAction::Click(i))
        }
    }
}

/// Token that expresses `action` (inverse of [`parse_action`]).
pub fn action_token(action: EnvAction, vocab: &Vocabulary) -> Option<usize> {
    let text = match action {
        EnvAction::Forward => "forward".to_string(),
        EnvAction::TurnLeft => "turn_left".to_string(),
        EnvAction::TurnRight => "turn_right".to_string(),
        EnvAction::Pick(i) => format!("pick{i}"),
        EnvAction::Plus => "plus".to_string(),
        EnvAction::Times => "times".to_string(),
        EnvAction::Submit => "submit".to_string(),
        EnvAction::Search(a) => format!("search_{}", SHOP_ATTRS.iter().flat_map(|g| g.iter()).nth(a)?),
        EnvAction::Click(i) => format!("click{i}"),
        EnvAction::Buy => "buy".to_string(),
    };
    vocab.id(&text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub parsed: bool,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_obs: Observation,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

// --- navigation ---------------------------------------------------------

const NAV_CHANNELS: usize = 8;
const CH_EMPTY: u8 = 0;
const CH_WALL: u8 = 1;
const CH_GOAL: u8 = 2;
const CH_AGENT: u8 = 3; // + heading
const CH_UNSEEN: u8 = 7;

/// Heading: 0 = east, 1 = south, 2 = west, 3 = north.
const DIRS: [(isize, isize); 4] = [(0, 1), (1, 0), (0, -1), (-1, 0)];

#[derive(Debug, Clone, PartialEq)]
struct NavState {
    h: usize,
    w: usize,
    walls: Vec<bool>,
    goal: (usize, usize),
    pos: (usize, usize),
    heading: usize,
}

impl NavState {
    fn passable(&self, r: isize, c: isize) -> bool {
        r >= 0
            && c >= 0
            && (r as usize) < self.h
            && (c as usize) < self.w
            && !self.walls[r as usize * self.w + c as usize]
    }

    fn apply(&self, pos: (usize, usize), heading: usize, a: EnvAction) -> ((usize, usize), usize) {
        match a {
            EnvAction::TurnLeft => (pos, (heading + 3) % 4),
            EnvAction::TurnRight => (pos, (heading + 1) % 4),
            EnvAction::Forward => {
                let (dr, dc) = DIRS[heading];
                let (r, c) = (pos.0 as isize + dr, pos.1 as isize + dc);
                if self.passable(r, c) {
                    ((r as usize, c as usize), heading)
                } else {
                    (pos, heading)
                }
            }
            _ => (pos, heading),
        }
    }

    fn shortest_path(&self) -> Option<usize> {
        let idx = |p: (usize, usize), hd: usize| (p.0 * self.w + p.1) * 4 + hd;
        let mut seen = vec![false; self.h * self.w * 4];
        let mut q = VecDeque::new();
        seen[idx(self.pos, self.heading)] = true;
        q.push_back((self.pos, self.heading, 0usize));
        while let Some((p, hd, d)) = q.pop_front() {
            if p == self.goal {
                return Some(d);
            }
            for a in [EnvAction::Forward, EnvAction::TurnLeft, EnvAction::TurnRight] {
                let (np, nh) = self.apply(p, hd, a);
                if !seen[idx(np, nh)] {
                    seen[idx(np, nh)] = true;
                    q.push_back((np, nh, d + 1));
                }
            }
        }
        None
    }

    fn frame(&self, partial: Option<usize>) -> Vec<u8> {
        let mut f = vec![CH_EMPTY; self.h * self.w];
        for r in 0..self.h {
            for c in 0..self.w {
                let i = r * self.w + c;
                f[i] = if (r, c) == self.pos {
                    CH_AGENT + self.heading as u8
                } else if self.walls[i] {
                    CH_WALL
                } else if (r, c) == self.goal {
                    CH_GOAL
                } else {
                    CH_EMPTY
                };
                if let Some(rad) = partial {
                    let dr = r.abs_diff(self.pos.0);
                    let dc = c.abs_diff(self.pos.1);
                    if dr.max(dc) > rad {
                        f[i] = CH_UNSEEN;
                    }
                }
            }
        }
        f
    }
}

fn generate_nav(spec: &EnvSpec, seed: u64) -> Result<NavState, EnvError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ spec.seed.rotate_left(32));
    let (h, w) = (spec.height, spec.width);
    match spec.kind {
        EnvKind::HallwayNav => {
            let heading = if spec.random_heading && seed != 0 {
                rng.gen_range(0..4)
            } else {
                0
            };
            Ok(NavState {
                h,
                w,
                walls: vec![false; h * w],
                goal: (0, w - 1),
                pos: (0, 0),
                heading,
            })
        }
        EnvKind::RoomsNav => {
            let mut walls = vec![false; h * w];
            for r in 0..h {
                for c in 0..w {
                    if r == 0 || c == 0 || r == h - 1 || c == w - 1 {
                        walls[r * w + c] = true;
                    }
                }
            }
            let interior: Vec<(usize, usize)> = (1..h - 1).flat_map(|r| (1..w - 1).map(move |c| (r, c))).collect();
            let (pos, goal) = match spec.layout {
                RoomsLayout::OneRoom => {
                    let picks: Vec<_> = interior.choose_multiple(&mut rng, 2).cloned().collect();
                    (picks[0], picks[1])
                }
                RoomsLayout::WallGap => {
                    let wall_c = w / 2;
                    let gap_r = rng.gen_range(1..h - 1);
                    for r in 1..h - 1 {
                        if r != gap_r {
                            walls[r * w + wall_c] = true;
                        }
                    }
                    let left: Vec<_> = interior.iter().filter(|p| p.1 < wall_c).cloned().collect();
                    let right: Vec<_> = interior.iter().filter(|p| p.1 > wall_c).cloned().collect();
                    (*left.choose(&mut rng).unwrap(), *right.choose(&mut rng).unwrap())
                }
            };
            let heading = rng.gen_range(0..4);
            Ok(NavState {
                h,
                w,
                walls,
                goal,
                pos,
                heading,
            })
        }
        _ => Err(EnvError::Spec("not a navigation environment".into())),
    }
}

/// Shortest number of steps from the initial state of `(spec, seed)` to the goal.
pub fn success_oracle(spec: &EnvSpec, episode_seed: u64) -> Result<usize, EnvError> {
    spec.validate()?;
    let s = generate_nav(spec, episode_seed)?;
    s.shortest_path()
        .ok_or_else(|| EnvError::Spec(format!("goal unreachable for seed {episode_seed}")))
}

/// Command sequence realizing [`success_oracle`]'s shortest path.
pub fn oracle_plan(spec: &EnvSpec, episode_seed: u64) -> Result<Vec<EnvAction>, EnvError> {
    spec.validate()?;
    let s = generate_nav(spec, episode_seed)?;
    let idx = |p: (usize, usize), hd: usize| (p.0 * s.w + p.1) * 4 + hd;
    let mut prev: Vec<Option<(usize, EnvAction)>> = vec![None; s.h * s.w * 4];
    let mut seen = vec![false; s.h * s.w * 4];
    let mut q = VecDeque::new();
    seen[idx(s.pos, s.heading)] = true;
    q.push_back((s.pos, s.heading));
    while let Some((p, hd)) = q.pop_front() {
        if p == s.goal {
            let mut plan = Vec::new();
            let mut cur = idx(p, hd);
            while let Some((from, a)) = prev[cur] {
                plan.push(a);
                cur = from;
            }
            plan.reverse();
            return Ok(plan);
        }
        for a in [EnvAction::Forward, EnvAction::TurnLeft, EnvAction::TurnRight] {
            let (np, nh) = s.apply(p, hd, a);
            let j = idx(np, nh);
            if !seen[j] {
                seen[j] = true;
                prev[j] = Some((idx(p, hd), a));
                q.push_back((np, nh));
            }
        }
    }
    Err(EnvError::Spec("goal unreachable".into()))
}

// --- cards --------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
struct CardState {
    cards: Vec<usize>,
    used: Vec<bool>,
    target: usize,
    total: usize,
    times: bool,
}

fn digits(n: usize, width: usize) -> Vec<usize> {
    let mut d = vec![0; width];
    let mut n = n.min(10usize.pow(width as u32) - 1);
    for slot in d.iter_mut().rev() {
        *slot = n % 10;
        n /= 10;
    }
    d
}

// --- shop ---------------------------------------------------------------

const SHOP_MAX_ITEMS: usize = 6;
/// Attribute groups: colour, size, kind.
pub const SHOP_ATTRS: [&[&str]; 3] = [&["red", "blue", "green"], &["small", "large"], &["shirt", "shoe", "hat"]];
const SHOP_ATTR_COUNT: usize = 8;
const SHOP_CH_EMPTY: u8 = SHOP_ATTR_COUNT as u8;
const SHOP_CH_UNSELECTED: u8 = SHOP_CH_EMPTY + 1;
const SHOP_CH_SELECTED: u8 = SHOP_CH_EMPTY + 2;
const SHOP_CHANNELS: usize = SHOP_ATTR_COUNT + 3;

fn attr_offset(group: usize) -> usize {
    SHOP_ATTRS[..group].iter().map(|g| g.len()).sum()
}

#[derive(Debug, Clone, PartialEq)]
struct ShopState {
    /// Attribute index within each group.
    items: Vec<[usize; 3]>,
    target: usize,
    filters: Vec<usize>,
    selected: Option<usize>,
}

impl ShopState {
    fn visible(&self) -> Vec<usize> {
        (0..self.items.len())
            .filter(|&i| {
                self.filters.iter().all(|&f| {
                    (0..3).any(|g| attr_offset(g) + self.items[i][g] == f)
                })
            })
            .collect()
    }
}

// --- environment --------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum State {
    Nav(NavState),
    Cards(CardState),
    Shop(ShopState),
}

/// One episode-owning environment instance.
#[derive(Debug, Clone)]
pub struct Env {
    spec: EnvSpec,
    vocab: Arc<Vocabulary>,
    state: Option<State>,
    frames: VecDeque<Vec<u8>>,
    t: usize,
    done: bool,
}

impl Env {
    pub fn new(spec: EnvSpec) -> Result<Self, EnvError> {
        spec.validate()?;
        let vocab = Arc::new(spec.vocabulary());
        Ok(Self {
            spec,
            vocab,
            state: None,
            frames: VecDeque::new(),
            t: 0,
            done: false,
        })
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn vocab(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn reset(&mut self, episode_seed: u64) -> Result<Observation, EnvError> {
        let state = match self.spec.kind {
            EnvKind::HallwayNav | EnvKind::RoomsNav => {
                let s = generate_nav(&self.spec, episode_seed)?;
                debug_assert!(s.shortest_path().is_some());
                State::Nav(s)
            }
            EnvKind::CardPoints => {
                let mut rng = ChaCha8Rng::seed_from_u64(episode_seed ^ self.spec.seed.rotate_left(32));
                let n = self.spec.num_cards;
                let cards: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=self.spec.max_card)).collect();
                let mask = rng.gen_range(1..(1u32 << n));
                let target = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| cards[i]).sum();
                State::Cards(CardState {
                    cards,
                    used: vec![false; n],
                    target,
                    total: 0,
                    times: false,
                })
            }
            EnvKind::TinyShop => {
                let mut rng = ChaCha8Rng::seed_from_u64(episode_seed ^ self.spec.seed.rotate_left(32));
                let mut all: Vec<[usize; 3]> = Vec::new();
                for a in 0..SHOP_ATTRS[0].len() {
                    for b in 0..SHOP_ATTRS[1].len() {
                        for c in 0..SHOP_ATTRS[2].len() {
                            all.push([a, b, c]);
                        }
                    }
                }
                let items: Vec<[usize; 3]> = all.choose_multiple(&mut rng, self.spec.num_items).cloned().collect();
                let target = rng.gen_range(0..items.len());
                State::Shop(ShopState {
                    items,
                    target,
                    filters: Vec::new(),
                    selected: None,
                })
            }
        };
        self.state = Some(state);
        self.t = 0;
        self.done = false;
        let f = self.render();
        self.frames = std::iter::repeat(f).take(self.spec.frame_stack).collect();
        Ok(self.observation())
    }

    fn render(&self) -> Vec<u8> {
        match self.state.as_ref().expect("reset before render") {
            State::Nav(s) => s.frame(self.spec.partial_obs.then_some(self.spec.view_radius)),
            State::Cards(s) => s
                .cards
                .iter()
                .zip(&s.used)
                .map(|(&c, &u)| ((c - 1) * 2 + u as usize) as u8)
                .collect(),
            State::Shop(s) => {
                let w = self.spec.num_items;
                let mut f = vec![SHOP_CH_EMPTY; 4 * w];
                for (col, &item) in s.visible().iter().enumerate() {
                    for g in 0..3 {
                        f[g * w + col] = (attr_offset(g) + s.items[item][g]) as u8;
                    }
                    f[3 * w + col] = if s.selected == Some(item) {
                        SHOP_CH_SELECTED
                    } else {
                        SHOP_CH_UNSELECTED
                    };
                }
                f
            }
        }
    }

    fn context(&self) -> Vec<usize> {
        let v = &self.vocab;
        match self.state.as_ref().expect("reset before context") {
            State::Nav(_) => ["go", "to", "goal"].iter().map(|t| v.expect_id(t)).collect(),
            State::Cards(s) => {
                let mut c = vec![v.expect_id("target")];
                c.extend(digits(s.target, 2).iter().map(|d| v.expect_id(&format!("d{d}"))));
                c.push(v.expect_id("total"));
                c.extend(digits(s.total, 3).iter().map(|d| v.expect_id(&format!("d{d}"))));
                c.push(v.expect_id("op"));
                c.push(v.expect_id(if s.times { "times" } else { "plus" }));
                c
            }
            State::Shop(s) => {
                let mut c = vec![v.expect_id("want")];
                for g in 0..3 {
                    c.push(v.expect_id(SHOP_ATTRS[g][s.items[s.target][g]]));
                }
                c
            }
        }
    }

    fn observation(&self) -> Observation {
        Observation {
            dims: self.spec.obs_dims(),
            cells: self.frames.iter().flatten().cloned().collect(),
            context_tokens: self.context(),
        }
    }

    /// Parses the emission and applies it.
    pub fn step_tokens(&mut self, tokens: &[usize]) -> Result<StepOutcome, EnvError> {
        let parsed = parse_action(tokens, &self.vocab, &self.spec);
        self.step(parsed)
    }

    pub fn step(&mut self, action: Result<EnvAction, ParseFailure>) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeDone);
        }
        let horizon = self.spec.horizon;
        let state = self.state.as_mut().ok_or(EnvError::NotReset)?;
        self.t += 1;
        let mut reward = 0.0;
        let mut success = false;
        let mut terminal = false;
        let parsed = action.is_ok();
        match action {
            Err(_) => reward += PARSE_PENALTY,
            Ok(a) => match state {
                State::Nav(s) => {
                    let (p, h) = s.apply(s.pos, s.heading, a);
                    s.pos = p;
                    s.heading = h;
                    if s.pos == s.goal {
                        success = true;
                    }
                }
                State::Cards(s) => match a {
                    EnvAction::Pick(i) if i < s.cards.len() && !s.used[i] => {
                        s.total = if s.times { s.total * s.cards[i] } else { s.total + s.cards[i] };
                        s.used[i] = true;
                        s.times = false;
                    }
                    EnvAction::Plus => s.times = false,
                    EnvAction::Times => s.times = true,
                    EnvAction::Submit => {
                        terminal = true;
                        success = s.total == s.target;
                    }
                    _ => {}
                },
                State::Shop(s) => match a {
                    EnvAction::Search(f) => {
                        if !s.filters.contains(&f) {
                            s.filters.push(f);
                        }
                        s.selected = s.selected.filter(|x| s.visible().contains(x));
                    }
                    EnvAction::Click(i) => {
                        if let Some(&item) = s.visible().get(i) {
                            s.selected = Some(item);
                        }
                    }
                    EnvAction::Buy => {
                        terminal = true;
                        success = s.selected == Some(s.target);
                    }
                    _ => {}
                },
            },
        }
        if success {
            reward += 1.0;
        }
        if self.spec.reward == RewardScheme::Shaped {
            reward -= 1.0 / horizon as f64;
        }
        let reward = reward.clamp(-1.0, 1.0);
        self.done = success || terminal || self.t >= horizon;
        let f = self.render();
        self.frames.pop_front();
        self.frames.push_back(f);
        Ok(StepOutcome {
            next_obs: self.observation(),
            reward,
            done: self.done,
            info: StepInfo { parsed, success },
        })
    }
}

/// Checks that `seeds` all produce solvable navigation layouts.
pub fn all_solvable(spec: &EnvSpec, seeds: impl IntoIterator<Item = u64>) -> bool {
    let mut ok = HashSet::new();
    for s in seeds {
        ok.insert(success_oracle(spec, s).is_ok());
    }
    !ok.contains(&false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::BOS;

    fn toks(vocab: &Vocabulary, words: &[&str]) -> Vec<usize> {
        let mut v = vec![BOS];
        for w in words {
            v.push(match *w {
                "SEP" => SEP,
                "EOS" => EOS,
                other => vocab.expect_id(other),
            });
        }
        v
    }

    #[test]
    fn reset_is_deterministic() {
        for kind in [EnvKind::HallwayNav, EnvKind::RoomsNav, EnvKind::CardPoints, EnvKind::TinyShop] {
            let spec = EnvSpec::defaults(kind);
            let mut a = Env::new(spec.clone()).unwrap();
            let mut b = Env::new(spec).unwrap();
            assert_eq!(a.reset(42).unwrap(), b.reset(42).unwrap());
        }
    }

    #[test]
    fn canonical_hallway_layout() {
        let spec = EnvSpec::hallway(8);
        let mut env = Env::new(spec.clone()).unwrap();
        let obs = env.reset(0).unwrap();
        let hw = 8;
        let first = &obs.cells[..hw];
        assert_eq!(first[0], CH_AGENT); // facing east
        assert_eq!(first[7], CH_GOAL);
        for l in 1..4 {
            assert_eq!(&obs.cells[l * hw..(l + 1) * hw], first);
        }
        assert_eq!(obs.dims.frames, 4);
        assert!(obs.validate(&spec.obs_dims()).is_ok());
    }

    #[test]
    fn parse_grammar() {
        let spec = EnvSpec::hallway(8);
        let v = spec.vocabulary();
        let a = toks(&v, &["t1", "t2", "SEP", "forward", "EOS"]);
        assert_eq!(parse_action(&a, &v, &spec), Ok(EnvAction::Forward));
        let b = toks(&v, &["t2", "t1", "SEP", "forward", "EOS"]);
        assert_eq!(parse_action(&b, &v, &spec), Ok(EnvAction::Forward));
        assert_eq!(parse_action(&toks(&v, &["SEP", "EOS"]), &v, &spec), Err(ParseFailure::EmptyActionSpan));
        assert_eq!(
            parse_action(&toks(&v, &["t1", "forward", "EOS"]), &v, &spec),
            Err(ParseFailure::MissingSeparator)
        );
        assert_eq!(
            parse_action(&toks(&v, &["SEP", "forward", "turn_left", "EOS"]), &v, &spec),
            Err(ParseFailure::OutsideGrammar)
        );
        assert_eq!(
            parse_action(&toks(&v, &["SEP", "t0", "EOS"]), &v, &spec),
            Err(ParseFailure::OutsideGrammar)
        );
        assert_eq!(
            parse_action(&toks(&v, &["SEP", "forward", "SEP"]), &v, &spec),
            Err(ParseFailure::RepeatedSeparator)
        );
        // truncated without EOS still parses
        assert_eq!(parse_action(&toks(&v, &["SEP", "turn_left"]), &v, &spec), Ok(EnvAction::TurnLeft));
    }

    #[test]
    fn action_token_round_trips() {
        for kind in [EnvKind::HallwayNav, EnvKind::CardPoints, EnvKind::TinyShop] {
            let spec = EnvSpec::defaults(kind);
            let v = spec.vocabulary();
            for t in spec.action_tokens() {
                let id = v.expect_id(&t);
                let a = parse_action(&[BOS, SEP, id, EOS], &v, &spec).unwrap();
                assert_eq!(action_token(a, &v), Some(id));
            }
        }
    }

    #[test]
    fn hallway_goal_step() {
        let spec = EnvSpec::hallway(8);
        let mut env = Env::new(spec).unwrap();
        env.reset(0).unwrap();
        for _ in 0..6 {
            let o = env.step(Ok(EnvAction::Forward)).unwrap();
            assert_eq!(o.reward, 0.0);
            assert!(!o.done);
        }
        let o = env.step(Ok(EnvAction::Forward)).unwrap();
        assert_eq!(o.reward, 1.0);
        assert!(o.done && o.info.success);
        assert_eq!(env.step(Ok(EnvAction::Forward)), Err(EnvError::EpisodeDone));
    }

    #[test]
    fn parse_failure_consumes_step_without_moving() {
        let spec = EnvSpec::hallway(8);
        let mut env = Env::new(spec).unwrap();
        let o0 = env.reset(0).unwrap();
        let o = env.step(Err(ParseFailure::MissingSeparator)).unwrap();
        assert_eq!(o.reward, PARSE_PENALTY);
        assert_eq!(env.steps_taken(), 1);
        assert_eq!(o.next_obs, o0);
    }

    #[test]
    fn frame_stack_shifts() {
        let spec = EnvSpec::hallway(8);
        let mut env = Env::new(spec).unwrap();
        let o0 = env.reset(0).unwrap();
        let o1 = env.step(Ok(EnvAction::Forward)).unwrap().next_obs;
        assert_eq!(&o1.cells[..24], &o0.cells[8..]);
        assert_eq!(o1.cells[24 + 1], CH_AGENT);
    }

    #[test]
    fn horizon_forces_done() {
        let spec = EnvSpec::hallway(8);
        let mut env = Env::new(spec).unwrap();
        env.reset(0).unwrap();
        let mut dones = 0;
        for _ in 0..20 {
            if env.step(Ok(EnvAction::TurnLeft)).unwrap().done {
                dones += 1;
            }
        }
        assert_eq!(dones, 1);
        assert!(env.is_done());
    }

    #[test]
    fn card_points_example() {
        let mut spec = EnvSpec::defaults(EnvKind::CardPoints);
        spec.seed = 0;
        let mut env = Env::new(spec).unwrap();
        env.reset(1).unwrap();
        // Force the documented instance.
        if let Some(State::Cards(s)) = env.state.as_mut() {
            s.cards = vec![2, 3, 5];
            s.target = 7;
        }
        env.step(Ok(EnvAction::Pick(0))).unwrap();
        env.step(Ok(EnvAction::Pick(2))).unwrap();
        let o = env.step(Ok(EnvAction::Submit)).unwrap();
        assert_eq!(o.reward, 1.0);
        assert!(o.done && o.info.success);
    }

    #[test]
    fn card_targets_are_subset_sums() {
        let spec = EnvSpec::defaults(EnvKind::CardPoints);
        for seed in 0..200 {
            let mut env = Env::new(spec.clone()).unwrap();
            env.reset(seed).unwrap();
            if let Some(State::Cards(s)) = &env.state {
                let n = s.cards.len();
                let reachable = (1u32..(1 << n)).any(|m| {
                    (0..n).filter(|i| m & (1 << i) != 0).map(|i| s.cards[i]).sum::<usize>() == s.target
                });
                assert!(reachable);
            }
        }
    }

    #[test]
    fn shop_buy_target() {
        let spec = EnvSpec::defaults(EnvKind::TinyShop);
        let mut env = Env::new(spec).unwrap();
        env.reset(5).unwrap();
        let (target, attrs) = match &env.state {
            Some(State::Shop(s)) => (s.target, s.items[s.target]),
            _ => unreachable!(),
        };
        env.step(Ok(EnvAction::Search(attr_offset(0) + attrs[0]))).unwrap();
        env.step(Ok(EnvAction::Search(attr_offset(1) + attrs[1]))).unwrap();
        env.step(Ok(EnvAction::Search(attr_offset(2) + attrs[2]))).unwrap();
        let vis = match &env.state {
            Some(State::Shop(s)) => s.visible(),
            _ => unreachable!(),
        };
        assert_eq!(vis, vec![target]);
        env.step(Ok(EnvAction::Click(0))).unwrap();
        let o = env.step(Ok(EnvAction::Buy)).unwrap();
        assert!(o.info.success);
        assert_eq!(o.reward, 1.0);
    }

    #[test]
    fn oracle_counts() {
        let mut spec = EnvSpec::hallway(8);
        assert_eq!(success_oracle(&spec, 0).unwrap(), 7);
        spec.random_heading = true;
        // find a seed facing west
        let west = (1..100)
            .find(|&s| generate_nav(&spec, s).unwrap().heading == 2)
            .unwrap();
        assert_eq!(success_oracle(&spec, west).unwrap(), 9);
        let north = (1..100)
            .find(|&s| generate_nav(&spec, s).unwrap().heading == 3)
            .unwrap();
        assert_eq!(success_oracle(&spec, north).unwrap(), 8);
    }

    #[test]
    fn rooms_layouts_solvable() {
        let mut spec = EnvSpec::defaults(EnvKind::RoomsNav);
        assert!(all_solvable(&spec, 0..300));
        spec.layout = RoomsLayout::WallGap;
        assert!(all_solvable(&spec, 0..300));
    }

    #[test]
    fn oracle_plan_reaches_goal() {
        let mut spec = EnvSpec::defaults(EnvKind::RoomsNav);
        spec.layout = RoomsLayout::WallGap;
        for seed in 0..50 {
            let plan = oracle_plan(&spec, seed).unwrap();
            assert_eq!(plan.len(), success_oracle(&spec, seed).unwrap());
            let mut env = Env::new(spec.clone()).unwrap();
            env.reset(seed).unwrap();
            let mut last = None;
            for a in plan {
                last = Some(env.step(Ok(a)).unwrap());
            }
            assert!(last.map_or(false, |o| o.info.success) || success_oracle(&spec, seed).unwrap() == 0);
        }
    }

    #[test]
    fn partial_observation_masks_far_cells() {
        let mut spec = EnvSpec::hallway(8);
        spec.partial_obs = true;
        spec.view_radius = 2;
        let mut env = Env::new(spec).unwrap();
        let o = env.reset(0).unwrap();
        assert_eq!(o.cells[7], CH_UNSEEN);
        assert_eq!(o.cells[2], CH_EMPTY);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = EnvSpec::hallway(8);
        spec.horizon = 0;
        assert!(matches!(Env::new(spec), Err(EnvError::Spec(_))));
        let mut spec = EnvSpec::hallway(8);
        spec.height = 2;
        assert!(Env::new(spec).is_err());
    }

    #[test]
    fn shaped_reward_penalizes_each_step() {
        let mut spec = EnvSpec::hallway(8);
        spec.reward = RewardScheme::Shaped;
        let mut env = Env::new(spec).unwrap();
        env.reset(0).unwrap();
        let o = env.step(Ok(EnvAction::TurnLeft)).unwrap();
        assert!((o.reward + 1.0 / 20.0).abs() < 1e-15);
    }
}
