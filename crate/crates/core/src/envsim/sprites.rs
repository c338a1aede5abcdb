use super::AGENT_SIZE;

/// 3x5 digit glyphs; bit 2 is the leftmost column.
pub const DIGIT_FONT: [[u8; 5]; 10] = [
    [0b111, 0b101, 0b101, 0b101, 0b111],
    [0b010, 0b110, 0b010, 0b010, 0b111],
    [0b111, 0b001, 0b111, 0b100, 0b111],
    [0b111, 0b001, 0b111, 0b001, 0b111],
    [0b101, 0b101, 0b111, 0b001, 0b001],
    [0b111, 0b100, 0b111, 0b001, 0b111],
    [0b111, 0b100, 0b111, 0b101, 0b111],
    [0b111, 0b001, 0b010, 0b010, 0b010],
    [0b111, 0b101, 0b111, 0b101, 0b111],
    [0b111, 0b101, 0b111, 0b001, 0b111],
];

// Solid rows alternate with rows whose right half is striped; mirroring
// flips the stripes. The striped rows are two apart, so a 2x2 ball never
// hides more than one of them.
const FACING_RIGHT: [&str; AGENT_SIZE] = [
    "######", //
    "###.#.", //
    "######", //
    "###.#.", //
    "######", //
    "###.#.", //
];

pub fn agent_sprite(facing_right: bool) -> [[bool; AGENT_SIZE]; AGENT_SIZE] {
    let mut out = [[false; AGENT_SIZE]; AGENT_SIZE];
    for (y, row) in FACING_RIGHT.iter().enumerate() {
        for (x, ch) in row.bytes().enumerate() {
            let col = if facing_right { x } else { AGENT_SIZE - 1 - x };
            out[y][col] = ch == b'#';
        }
    }
    out
}
