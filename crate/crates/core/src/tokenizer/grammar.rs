use super::{bar_slots, Token, Vocab};
use crate::extractor::DRUM_CLASS;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GrammarState {
    /// Nothing consumed yet.
    Start,
    /// Inside a bar, between notes. `header` counts how many of the
    /// optional meter/tempo tokens may still follow the bar token.
    Body {
        header: u8,
    },
    /// After a position token; a note must follow.
    Positioned,
    /// After a program token; a pitch must follow.
    Programmed {
        drum: bool,
    },
    Pitched,
    Timed,
    Done,
}

/// Incremental acceptor for the music-event grammar. The first bar must
/// carry a meter and then a tempo; later bars may change either right
/// after the bar token. Positions strictly increase within a bar and each
/// position holds one or more `Program Pitch Duration Velocity` groups.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Grammar {
    state: GrammarState,
    bars: usize,
    bar_len: usize,
    last_position: Option<u16>,
    /// The first bar's header is still incomplete.
    opening: bool,
    bar_budget: Option<usize>,
}

impl Default for Grammar {
    fn default() -> Self {
        Self::new(None)
    }
}

impl Grammar {
    pub fn new(bar_budget: Option<usize>) -> Self {
        Self {
            state: GrammarState::Start,
            bars: 0,
            bar_len: 0,
            last_position: None,
            opening: false,
            bar_budget,
        }
    }

    pub fn state(&self) -> GrammarState {
        self.state
    }

    pub fn bars(&self) -> usize {
        self.bars
    }

    pub fn in_opening_header(&self) -> bool {
        self.opening
    }

    /// True when the input so far ends in the middle of a note or of the
    /// first bar's header.
    pub fn is_incomplete(&self) -> bool {
        self.opening
            || matches!(
                self.state,
                GrammarState::Positioned
                    | GrammarState::Programmed { .. }
                    | GrammarState::Pitched
                    | GrammarState::Timed
            )
    }

    fn bar_allowed(&self) -> bool {
        self.bar_budget.is_none_or(|b| self.bars < b)
    }

    pub fn allows(&self, t: Token) -> bool {
        use GrammarState::*;
        match (self.state, t) {
            (Start, Token::Bar) => self.bar_allowed(),
            (Start, Token::Eos) => true,
            (Body { header: 2 }, Token::TimeSig(n, d)) => bar_slots(n, d) > 0,
            (Body { header }, Token::Tempo(c)) if header == 1 || (header == 2 && !self.opening) => {
                c < 3
            }
            _ if self.opening => false,
            (Body { .. }, Token::Position(p)) => {
                (p as usize) < self.bar_len && self.last_position.is_none_or(|l| p > l)
            }
            (Body { .. }, Token::Program(c)) => {
                self.last_position.is_some() && (c as usize) <= DRUM_CLASS
            }
            (Body { .. }, Token::Bar) => self.bar_allowed(),
            (Body { .. }, Token::Eos) => true,
            (Positioned, Token::Program(c)) => (c as usize) <= DRUM_CLASS,
            (Programmed { drum: false }, Token::Pitch(_)) => true,
            (Programmed { drum: true }, Token::DrumPitch(_)) => true,
            (Pitched, Token::Duration(_)) => true,
            (Timed, Token::Velocity(_)) => true,
            _ => false,
        }
    }

    /// Consumes `t` if the grammar allows it; returns whether it did.
    pub fn advance(&mut self, t: Token) -> bool {
        use GrammarState::*;
        if !self.allows(t) {
            return false;
        }
        self.state = match t {
            Token::Bar => {
                self.opening = self.bars == 0;
                self.bars += 1;
                self.last_position = None;
                Body { header: 2 }
            }
            Token::TimeSig(n, d) => {
                self.bar_len = bar_slots(n, d);
                Body { header: 1 }
            }
            Token::Tempo(_) => {
                self.opening = false;
                Body { header: 0 }
            }
            Token::Position(p) => {
                self.last_position = Some(p);
                Positioned
            }
            Token::Program(c) => Programmed {
                drum: c as usize == DRUM_CLASS,
            },
            Token::Pitch(_) | Token::DrumPitch(_) => Pitched,
            Token::Duration(_) => Timed,
            Token::Velocity(_) => Body { header: 0 },
            Token::Eos => Done,
            Token::Sep | Token::Prefix { .. } => unreachable!("rejected by allows"),
        };
        true
    }

    /// Marks every vocabulary id the grammar accepts next.
    pub fn fill_mask(&self, vocab: &Vocab, mask: &mut [bool]) {
        for (id, m) in mask.iter_mut().enumerate() {
            *m = vocab.token(id).is_some_and(|t| self.allows(t));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(tokens: &[Token]) -> (Grammar, Option<usize>) {
        let mut g = Grammar::new(None);
        for (i, &t) in tokens.iter().enumerate() {
            if !g.advance(t) {
                return (g, Some(i));
            }
        }
        (g, None)
    }

    #[test]
    fn first_bar_needs_meter_then_tempo() {
        assert_eq!(run(&[Token::Bar, Token::Position(0)]).1, Some(1));
        assert_eq!(run(&[Token::Bar, Token::Tempo(0)]).1, Some(1));
        let (g, err) = run(&[Token::Bar, Token::TimeSig(4, 4)]);
        assert_eq!(err, None);
        assert!(g.is_incomplete());
        let (g, err) = run(&[
            Token::Bar,
            Token::TimeSig(3, 4),
            Token::Tempo(1),
            Token::Bar,
        ]);
        assert_eq!(err, None);
        assert!(!g.is_incomplete());
    }

    #[test]
    fn positions_increase_and_fit_the_bar() {
        let head = [Token::Bar, Token::TimeSig(3, 4), Token::Tempo(1)];
        let note = [
            Token::Program(0),
            Token::Pitch(60),
            Token::Duration(12),
            Token::Velocity(4),
        ];
        let mut seq: Vec<Token> = head.to_vec();
        seq.push(Token::Position(12));
        seq.extend(note);
        seq.push(Token::Position(12));
        assert_eq!(run(&seq).1, Some(8));
        let mut seq: Vec<Token> = head.to_vec();
        seq.push(Token::Position(36));
        assert_eq!(run(&seq).1, Some(3));
    }

    #[test]
    fn drum_program_requires_drum_pitch() {
        let seq = [
            Token::Bar,
            Token::TimeSig(4, 4),
            Token::Tempo(1),
            Token::Position(0),
            Token::Program(DRUM_CLASS as u8),
            Token::Pitch(36),
        ];
        assert_eq!(run(&seq).1, Some(5));
    }

    #[test]
    fn bar_budget_blocks_extra_bars() {
        let mut g = Grammar::new(Some(1));
        for t in [Token::Bar, Token::TimeSig(4, 4), Token::Tempo(0)] {
            assert!(g.advance(t));
        }
        assert!(!g.allows(Token::Bar));
        assert!(g.allows(Token::Eos));
    }

    #[test]
    fn prefix_and_separator_never_allowed() {
        let g = Grammar::new(None);
        assert!(!g.allows(Token::Sep));
        assert!(!g.allows(Token::Prefix {
            attribute: 0,
            value: 0
        }));
    }
}
