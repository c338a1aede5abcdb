//! A small annotated arcade environment.
//!
//! Frames are grayscale `u8` images with five entities drawn in fixed
//! layers: a HUD (score digits and a clock bar), an enemy patrolling a lane,
//! the agent sprite, and a 2-pixel ball on top. Every state variable exposed
//! as a label can be recovered exactly from the pixels.

mod dataset;
mod sprites;

pub use dataset::{
    collect_trajectories, label_entropy, EpisodeSpan, Observation, Split, TrajectoryDataset,
};
pub(crate) use dataset::entropy_of;
pub use sprites::{agent_sprite, DIGIT_FONT};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const BACKGROUND: u8 = 0;
pub const HUD_LEVEL: u8 = 150;
pub const ENEMY_LEVEL: u8 = 100;
pub const AGENT_LEVEL: u8 = 200;
pub const BALL_LEVEL: u8 = 255;

/// Rows reserved for the score and clock.
pub const HUD_ROWS: usize = 8;
pub const AGENT_SIZE: usize = 6;
pub const DIGIT_W: usize = 3;
pub const DIGIT_H: usize = 5;
/// Clock ticks once every this many steps and wraps at [`CLOCK_PERIOD`].
pub const CLOCK_DIVISOR: u32 = 4;
pub const CLOCK_PERIOD: u32 = 16;

/// Ground-truth variable groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    AgentLoc,
    SmallLoc,
    OtherLoc,
    ScoreClockLivesDisplay,
    Misc,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::AgentLoc,
        Category::SmallLoc,
        Category::OtherLoc,
        Category::ScoreClockLivesDisplay,
        Category::Misc,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Category::AgentLoc => "agent_loc",
            Category::SmallLoc => "small_loc",
            Category::OtherLoc => "other_loc",
            Category::ScoreClockLivesDisplay => "score_clock_lives_display",
            Category::Misc => "misc",
        }
    }

    /// Row label used in report tables.
    pub fn title(self) -> &'static str {
        match self {
            Category::AgentLoc => "Agent Loc.",
            Category::SmallLoc => "Small Loc.",
            Category::OtherLoc => "Other Loc.",
            Category::ScoreClockLivesDisplay => "Score/Clock/Lives/Display",
            Category::Misc => "Misc.",
        }
    }

    pub fn from_key(key: &str) -> Option<Category> {
        Category::ALL.into_iter().find(|c| c.key() == key)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableSpec {
    pub name: String,
    pub category: Category,
}

/// Label order used in every dataset produced by this environment.
pub fn variable_specs() -> Vec<VariableSpec> {
    [
        ("agent_x", Category::AgentLoc),
        ("agent_y", Category::AgentLoc),
        ("ball_x", Category::SmallLoc),
        ("ball_y", Category::SmallLoc),
        ("enemy_x", Category::OtherLoc),
        ("enemy_y", Category::OtherLoc),
        ("score", Category::ScoreClockLivesDisplay),
        ("clock", Category::ScoreClockLivesDisplay),
        ("facing", Category::Misc),
        ("level", Category::Misc),
    ]
    .into_iter()
    .map(|(name, category)| VariableSpec {
        name: name.to_string(),
        category,
    })
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Action {
    Noop = 0,
    Up = 1,
    Down = 2,
    Left = 3,
    Right = 4,
}

impl Action {
    pub const COUNT: usize = 5;

    pub fn from_index(index: usize) -> Result<Action> {
        Ok(match index {
            0 => Action::Noop,
            1 => Action::Up,
            2 => Action::Down,
            3 => Action::Left,
            4 => Action::Right,
            _ => {
                return Err(Error::config(format!(
                    "action index {index} outside 0..{}",
                    Action::COUNT
                )))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub name: String,
    pub height: usize,
    pub width: usize,
    /// Agent displacement per move action, in pixels.
    pub agent_speed: usize,
    /// Ball displacement per step along each axis; at least 2.
    pub ball_speed: usize,
    /// Ball side length; 1 or 2.
    pub ball_size: usize,
    pub enemy_width: usize,
    pub enemy_height: usize,
    /// Enemy displacement per step; 0 freezes it.
    pub enemy_speed: usize,
    pub episode_cap: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig::desk()
    }
}

impl EnvConfig {
    /// 64x64 frames.
    pub fn desk() -> Self {
        EnvConfig {
            name: "catch".to_string(),
            height: 64,
            width: 64,
            agent_speed: 2,
            ball_speed: 2,
            ball_size: 2,
            enemy_width: 6,
            enemy_height: 4,
            enemy_speed: 1,
            episode_cap: 512,
        }
    }

    /// 210 rows by 160 columns, the Atari frame size.
    pub fn paper() -> Self {
        EnvConfig {
            height: 210,
            width: 160,
            agent_speed: 3,
            ball_speed: 3,
            enemy_width: 10,
            enemy_height: 6,
            enemy_speed: 2,
            ..EnvConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 48 || self.width < 48 {
            return Err(Error::config("environment frames must be at least 48x48"));
        }
        if self.height > 256 || self.width > 256 {
            return Err(Error::config("byte-valued labels limit frames to 256x256"));
        }
        if self.ball_speed < 2 || !(1..=2).contains(&self.ball_size) {
            return Err(Error::config("ball must move >= 2 px/step and be at most 2 px"));
        }
        if self.agent_speed == 0 || self.enemy_width == 0 || self.enemy_height == 0 {
            return Err(Error::config("agent speed and enemy size must be positive"));
        }
        if self.episode_cap == 0 {
            return Err(Error::config("episode cap must be positive"));
        }
        let l = self.layout();
        if l.lane_bottom <= l.lane_top + self.enemy_height || l.agent_bottom <= l.agent_top {
            return Err(Error::config("frame too small for the entity layout"));
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        let play = self.height - HUD_ROWS;
        let lane_top = HUD_ROWS + 1;
        let lane_bottom = HUD_ROWS + play * 3 / 10;
        Layout {
            lane_top,
            lane_bottom,
            agent_top: lane_bottom + 2,
            agent_bottom: self.height - AGENT_SIZE,
            ball_top: HUD_ROWS,
            ball_bottom: self.height - self.ball_size,
        }
    }
}

/// Inclusive coordinate bounds derived from the frame size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    /// Enemy rows span `lane_top..lane_bottom` (exclusive end).
    pub lane_top: usize,
    pub lane_bottom: usize,
    /// Allowed agent y range, inclusive.
    pub agent_top: usize,
    pub agent_bottom: usize,
    /// Allowed ball y range, inclusive.
    pub ball_top: usize,
    pub ball_bottom: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EnvState {
    pub agent_x: i32,
    pub agent_y: i32,
    pub facing_right: bool,
    pub ball_x: i32,
    pub ball_y: i32,
    pub ball_vx: i32,
    pub ball_vy: i32,
    pub enemy_x: i32,
    pub enemy_y: i32,
    pub enemy_dir: i32,
    pub score: u8,
    /// Steps since the episode began.
    pub tick: u32,
}

fn even_in<R: Rng + ?Sized>(rng: &mut R, lo: usize, hi: usize) -> i32 {
    // Even coordinates keep the ball on its lattice when it reflects off
    // even walls.
    let lo = lo.div_ceil(2);
    let hi = hi / 2;
    (rng.gen_range(lo..=hi) * 2) as i32
}

fn random_sign<R: Rng + ?Sized>(rng: &mut R) -> i32 {
    if rng.gen_bool(0.5) {
        1
    } else {
        -1
    }
}

fn reflect(pos: i32, vel: i32, lo: i32, hi: i32) -> (i32, i32) {
    let next = pos + vel;
    if next < lo {
        (2 * lo - next, -vel)
    } else if next > hi {
        (2 * hi - next, -vel)
    } else {
        (next, vel)
    }
}

impl EnvState {
    pub fn reset<R: Rng + ?Sized>(config: &EnvConfig, rng: &mut R) -> Result<EnvState> {
        config.validate()?;
        let l = config.layout();
        let speed = config.agent_speed;
        let ax = rng.gen_range(0..=(config.width - AGENT_SIZE) / speed) * speed;
        let ay = l.agent_top + rng.gen_range(0..=(l.agent_bottom - l.agent_top) / speed) * speed;
        let mut state = EnvState {
            agent_x: ax as i32,
            agent_y: ay as i32,
            facing_right: rng.gen_bool(0.5),
            ball_x: 0,
            ball_y: 0,
            ball_vx: 0,
            ball_vy: 0,
            enemy_x: rng.gen_range(0..=config.width - config.enemy_width) as i32,
            enemy_y: rng.gen_range(l.lane_top..=l.lane_bottom - config.enemy_height) as i32,
            enemy_dir: random_sign(rng),
            score: 0,
            tick: 0,
        };
        state.respawn_ball(config, rng);
        Ok(state)
    }

    fn respawn_ball<R: Rng + ?Sized>(&mut self, config: &EnvConfig, rng: &mut R) {
        let l = config.layout();
        let mid = (l.ball_top + l.ball_bottom) / 2;
        self.ball_x = even_in(rng, 0, config.width - config.ball_size);
        self.ball_y = even_in(rng, l.ball_top, mid);
        let s = config.ball_speed as i32;
        self.ball_vx = s * random_sign(rng);
        self.ball_vy = s * random_sign(rng);
    }

    fn ball_hits_agent(&self, config: &EnvConfig) -> bool {
        let b = config.ball_size as i32;
        let a = AGENT_SIZE as i32;
        self.ball_x < self.agent_x + a
            && self.agent_x < self.ball_x + b
            && self.ball_y < self.agent_y + a
            && self.agent_y < self.ball_y + b
    }

    /// Advances one step. Randomness is drawn only for respawns and enemy
    /// lane changes, so the result is a function of `(self, action, rng)`.
    pub fn step<R: Rng + ?Sized>(
        &self,
        config: &EnvConfig,
        action: Action,
        rng: &mut R,
    ) -> Result<EnvState> {
        let l = config.layout();
        let mut next = self.clone();
        let v = config.agent_speed as i32;
        let (dx, dy) = match action {
            Action::Noop => (0, 0),
            Action::Up => (0, -v),
            Action::Down => (0, v),
            Action::Left => (-v, 0),
            Action::Right => (v, 0),
        };
        next.agent_x = (next.agent_x + dx).clamp(0, (config.width - AGENT_SIZE) as i32);
        next.agent_y = (next.agent_y + dy).clamp(l.agent_top as i32, l.agent_bottom as i32);
        match action {
            Action::Left => next.facing_right = false,
            Action::Right => next.facing_right = true,
            _ => {}
        }

        let (bx, vx) = reflect(
            next.ball_x,
            next.ball_vx,
            0,
            (config.width - config.ball_size) as i32,
        );
        let (by, vy) = reflect(next.ball_y, next.ball_vy, l.ball_top as i32, l.ball_bottom as i32);
        (next.ball_x, next.ball_vx, next.ball_y, next.ball_vy) = (bx, vx, by, vy);
        if next.ball_hits_agent(config) {
            next.score = next.score.wrapping_add(1);
            next.respawn_ball(config, rng);
        }

        if config.enemy_speed > 0 {
            let max_x = (config.width - config.enemy_width) as i32;
            let ex = next.enemy_x + next.enemy_dir * config.enemy_speed as i32;
            if ex < 0 || ex > max_x {
                next.enemy_dir = -next.enemy_dir;
                next.enemy_x = ex.clamp(0, max_x);
                next.enemy_y =
                    rng.gen_range(l.lane_top..=l.lane_bottom - config.enemy_height) as i32;
            } else {
                next.enemy_x = ex;
            }
        }
        next.tick += 1;
        Ok(next)
    }

    pub fn clock(&self) -> u8 {
        ((self.tick / CLOCK_DIVISOR) % CLOCK_PERIOD) as u8
    }

    /// Label values in [`variable_specs`] order.
    pub fn labels(&self) -> Vec<u8> {
        vec![
            self.agent_x as u8,
            self.agent_y as u8,
            self.ball_x as u8,
            self.ball_y as u8,
            self.enemy_x as u8,
            self.enemy_y as u8,
            self.score,
            self.clock(),
            self.facing_right as u8,
            0,
        ]
    }

    /// Draws the frame as `height * width` grayscale bytes.
    pub fn render(&self, config: &EnvConfig) -> Vec<u8> {
        let (h, w) = (config.height, config.width);
        let mut img = vec![BACKGROUND; h * w];
        let put = |img: &mut [u8], x: usize, y: usize, v: u8| {
            if x < w && y < h {
                img[y * w + x] = v;
            }
        };

        // Score, three digits at the top left.
        let score = self.score as usize;
        for (d, digit) in [score / 100, (score / 10) % 10, score % 10].into_iter().enumerate() {
            let x0 = 1 + d * (DIGIT_W + 1);
            for (r, row) in DIGIT_FONT[digit].iter().enumerate() {
                for c in 0..DIGIT_W {
                    if row & (1 << (DIGIT_W - 1 - c)) != 0 {
                        put(&mut img, x0 + c, 1 + r, HUD_LEVEL);
                    }
                }
            }
        }
        // Clock bar, two pixels per tick, right-aligned region of the HUD.
        let bar_x0 = w - 2 * CLOCK_PERIOD as usize - 2;
        for x in 0..2 * self.clock() as usize {
            for y in 2..5 {
                put(&mut img, bar_x0 + x, y, HUD_LEVEL);
            }
        }

        for y in 0..config.enemy_height {
            for x in 0..config.enemy_width {
                put(
                    &mut img,
                    self.enemy_x as usize + x,
                    self.enemy_y as usize + y,
                    ENEMY_LEVEL,
                );
            }
        }

        let sprite = agent_sprite(self.facing_right);
        for (y, row) in sprite.iter().enumerate() {
            for (x, &on) in row.iter().enumerate() {
                if on {
                    put(
                        &mut img,
                        self.agent_x as usize + x,
                        self.agent_y as usize + y,
                        AGENT_LEVEL,
                    );
                }
            }
        }

        for y in 0..config.ball_size {
            for x in 0..config.ball_size {
                put(
                    &mut img,
                    self.ball_x as usize + x,
                    self.ball_y as usize + y,
                    BALL_LEVEL,
                );
            }
        }
        img
    }
}
