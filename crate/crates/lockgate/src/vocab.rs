//! Closed token vocabulary shared by task instructions and sub-task plans.
//!
//! Plans are short sequences like `[PICK, LETTER_A, EOS]` or
//! `[PLACE, LETTER_B, SLOT_1, EOS]`. A plan terminates at EOS or at the
//! standalone DONE token. Instructions reuse the same ids, e.g.
//! `[SPELL, LETTER_A, LETTER_B, LETTER_C]`.

pub const PAD: u16 = 0;
pub const BOS: u16 = 1;
pub const EOS: u16 = 2;
pub const DONE: u16 = 3;
pub const PICK: u16 = 4;
pub const PLACE: u16 = 5;
pub const INSERT: u16 = 6;
pub const HOME: u16 = 7;
/// Instruction head for spelling tasks.
pub const SPELL: u16 = 8;
/// Instruction head for insertion tasks.
pub const FILL: u16 = 9;
const LETTER_BASE: u16 = 10;
pub const MAX_LETTERS: u8 = 6;
const SLOT_BASE: u16 = LETTER_BASE + MAX_LETTERS as u16;
pub const MAX_SLOTS: u8 = 6;
pub const VOCAB: usize = (SLOT_BASE + MAX_SLOTS as u16) as usize;

pub fn letter_token(letter: u8) -> u16 {
    assert!(letter < MAX_LETTERS);
    LETTER_BASE + letter as u16
}

pub fn slot_token(slot: u8) -> u16 {
    assert!(slot < MAX_SLOTS);
    SLOT_BASE + slot as u16
}

pub fn is_terminal(tok: u16) -> bool {
    tok == EOS || tok == DONE
}

pub fn token_name(tok: u16) -> String {
    match tok {
        PAD => "pad".into(),
        BOS => "bos".into(),
        EOS => "eos".into(),
        DONE => "done".into(),
        PICK => "pick".into(),
        PLACE => "place".into(),
        INSERT => "insert".into(),
        HOME => "home".into(),
        SPELL => "spell".into(),
        FILL => "fill".into(),
        t if (LETTER_BASE..SLOT_BASE).contains(&t) => {
            format!("{}", (b'a' + (t - LETTER_BASE) as u8) as char)
        }
        t if t >= SLOT_BASE && (t as usize) < VOCAB => format!("slot{}", t - SLOT_BASE),
        t => format!("tok{t}"),
    }
}

pub fn plan_to_string(plan: &[u16]) -> String {
    plan.iter().map(|&t| token_name(t)).collect::<Vec<_>>().join(" ")
}
