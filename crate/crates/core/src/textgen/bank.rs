use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attributes::{schema, slot, slug, ARTISTS, GENRES, INSTRUMENTS};

use super::TextgenError;

/// Placeholder marker for an attribute, e.g. `[KEY]` or `[INSTRUMENT_PIANO]`.
pub fn placeholder(attribute: usize) -> String {
    let name = match attribute {
        a if a < slot::PITCH_RANGE => format!("INSTRUMENT_{}", slug(INSTRUMENTS[a]).to_uppercase()),
        slot::PITCH_RANGE => "PITCH_RANGE".into(),
        slot::DANCEABILITY => "DANCEABILITY".into(),
        slot::INTENSITY => "RHYTHM_INTENSITY".into(),
        slot::BAR => "NUM_BARS".into(),
        slot::TIME_SIGNATURE => "TIME_SIGNATURE".into(),
        slot::KEY => "KEY".into(),
        slot::TEMPO => "TEMPO".into(),
        slot::TIME => "TIME".into(),
        slot::ARTIST => "ARTIST".into(),
        slot::EMOTION => "EMOTION".into(),
        a => format!(
            "GENRE_{}",
            slug(GENRES[a - slot::GENRE_BASE]).to_uppercase()
        ),
    };
    format!("[{name}]")
}

/// Every `[UPPER_CASE]` marker in `text`, in order of appearance.
pub fn find_placeholders(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let b = text.as_bytes();
    let mut i = 0;
    while i < b.len() {
        if b[i] == b'[' {
            let mut j = i + 1;
            while j < b.len()
                && (b[j].is_ascii_uppercase() || b[j] == b'_' || b[j].is_ascii_digit())
            {
                j += 1;
            }
            if j < b.len() && b[j] == b']' && j > i + 1 {
                out.push(&text[i..=j]);
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub attribute: String,
    /// Value labels this template may express; `None` means any value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<String>>,
    pub text: String,
}

/// Templates per attribute plus surface forms per attribute value.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateBank {
    pub templates: Vec<Template>,
    /// attribute name → value label → surface forms (first is canonical).
    pub surfaces: BTreeMap<String, BTreeMap<String, Vec<String>>>,
}

const NUMBER_WORDS: [&str; 12] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven",
];

fn instrument_synonyms(name: &str) -> Vec<String> {
    let extra: &[&str] = match name {
        "piano" => &["pianoforte"],
        "guitar" => &["guitars"],
        "voice" => &["vocals", "singing"],
        "sax" => &["saxophone"],
        "synthesizer" => &["synth"],
        "drum" => &["drums", "drum kit"],
        "sound effect" => &["sound effects"],
        "strings" => &["string section"],
        "horn" => &["french horn"],
        _ => &[],
    };
    std::iter::once(name.to_string())
        .chain(extra.iter().map(|s| s.to_string()))
        .collect()
}

fn value_surfaces(attribute: usize, value: &str, display: &str) -> Vec<String> {
    let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    match attribute {
        a if a < slot::PITCH_RANGE => instrument_synonyms(display),
        a if (slot::GENRE_BASE..slot::EMOTION).contains(&a) => vec![display.to_string()],
        slot::PITCH_RANGE => {
            let k: usize = value.parse().expect("numeric pitch range label");
            let unit = if k == 1 { "octave" } else { "octaves" };
            vec![format!("{} {unit}", NUMBER_WORDS[k]), format!("{k} {unit}")]
        }
        slot::DANCEABILITY => match value {
            "danceable" => v(&["danceable", "suitable for dancing"]),
            _ => v(&["not danceable", "not suitable for dancing"]),
        },
        slot::INTENSITY => match value {
            "serene" => v(&["serene", "gentle"]),
            "moderate" => v(&["moderate", "steady"]),
            _ => v(&["intense", "busy"]),
        },
        slot::BAR => {
            let (lo, hi) = value.split_once('-').expect("bar range label");
            vec![format!("{lo} ~ {hi}"), format!("{lo} to {hi}")]
        }
        slot::TIME_SIGNATURE => match value {
            "other" => v(&["irregular", "uncommon"]),
            ts => vec![ts.to_string()],
        },
        slot::KEY => vec![value.to_string()],
        slot::TEMPO => match value {
            "slow" => v(&["slow", "leisurely"]),
            "moderato" => v(&["moderato", "medium"]),
            _ => v(&["fast", "quick"]),
        },
        slot::TIME => match value {
            ">60s" => v(&["more than 60 seconds", "over a minute"]),
            range => {
                let (lo, hi) = range
                    .trim_end_matches('s')
                    .split_once('-')
                    .expect("time range label");
                vec![
                    format!("{lo} ~ {hi} seconds"),
                    format!("{lo} to {hi} seconds"),
                ]
            }
        },
        slot::ARTIST => vec![value.to_string()],
        slot::EMOTION => match value {
            "quadrant 1" => v(&["happiness", "excitement"]),
            "quadrant 2" => v(&["tension", "anger"]),
            "quadrant 3" => v(&["sadness", "melancholy"]),
            _ => v(&["calmness", "relaxation"]),
        },
        _ => vec![value.to_string()],
    }
}

fn texts_for(attribute: usize) -> Vec<(Option<&'static str>, &'static str)> {
    match attribute {
        a if a < slot::PITCH_RANGE => vec![
            (Some("played"), "The [P] is played in this music."),
            (Some("played"), "This piece features the [P]."),
            (Some("played"), "You can hear [P] in the song."),
            (Some("not played"), "The [P] is not played in this music."),
            (Some("not played"), "This piece does not use the [P]."),
            (Some("not played"), "There is no [P] in the song."),
        ],
        a if (slot::GENRE_BASE..slot::EMOTION).contains(&a) => vec![
            (Some("with"), "The music belongs to the [P] genre."),
            (Some("with"), "This is a [P] piece."),
            (Some("with"), "The style of this song is [P]."),
            (Some("without"), "The music is not [P]."),
            (
                Some("without"),
                "This piece does not belong to the [P] genre.",
            ),
            (Some("without"), "The song has nothing to do with [P]."),
        ],
        slot::PITCH_RANGE => vec![
            (None, "The pitch range of the music spans [P]."),
            (None, "The melody covers [P]."),
            (None, "The notes stretch over [P]."),
        ],
        slot::DANCEABILITY => vec![
            (None, "The music is [P]."),
            (None, "This song is [P]."),
            (None, "People would find the rhythm [P]."),
        ],
        slot::INTENSITY => vec![
            (None, "The rhythm is [P]."),
            (None, "The music has a [P] rhythm."),
            (None, "Rhythmically, the piece feels [P]."),
        ],
        slot::BAR => vec![
            (None, "The song is composed of approximately [P] bars."),
            (None, "The song comprises [P] bars."),
            (None, "The piece lasts [P] bars."),
        ],
        slot::TIME_SIGNATURE => vec![
            (None, "The [P] time signature is used in the music."),
            (None, "The music is in [P]."),
            (None, "The meter of this song is [P]."),
        ],
        slot::KEY => vec![
            (None, "This music is composed in the [P] key."),
            (
                None,
                "This music's use of [P] key creates a distinct atmosphere.",
            ),
            (None, "The piece is written in a [P] key."),
        ],
        slot::TEMPO => vec![
            (None, "The tempo of the music is [P]."),
            (None, "The song is played at a [P] tempo."),
            (None, "This piece moves at a [P] pace."),
        ],
        slot::TIME => vec![
            (None, "The music lasts [P]."),
            (None, "The song is [P] long."),
            (None, "This piece has a duration of [P]."),
        ],
        slot::ARTIST => vec![
            (None, "The music is in the style of [P]."),
            (None, "This piece sounds like a work by [P]."),
            (None, "[P] could have composed this song."),
        ],
        _ => vec![
            (None, "The music is imbued with [P]."),
            (None, "The music conveys [P]."),
            (None, "Listeners may feel [P] in this song."),
        ],
    }
}

impl TemplateBank {
    pub fn builtin() -> Self {
        let s = schema();
        let mut templates = Vec::new();
        let mut surfaces = BTreeMap::new();
        debug_assert_eq!(ARTISTS.len() + 1, s.get(slot::ARTIST).cardinality());
        for (i, a) in s.attributes.iter().enumerate() {
            let ph = placeholder(i);
            for (value, text) in texts_for(i) {
                templates.push(Template {
                    attribute: a.name.clone(),
                    values: value.map(|v| vec![v.to_string()]),
                    text: text.replace("[P]", &ph),
                });
            }
            let per_value = a.values[..a.values.len() - 1]
                .iter()
                .map(|v| (v.clone(), value_surfaces(i, v, &a.display)))
                .collect();
            surfaces.insert(a.name.clone(), per_value);
        }
        Self {
            templates,
            surfaces,
        }
    }

    /// Checks that every template names a known attribute and holds exactly
    /// its own placeholder, and that every non-NA value has at least two
    /// templates and one surface form.
    pub fn validate(&self) -> Result<(), TextgenError> {
        let s = schema();
        let mut cover = vec![Vec::new(); s.len()];
        for (i, a) in s.attributes.iter().enumerate() {
            cover[i] = vec![0usize; a.cardinality() - 1];
        }
        for t in &self.templates {
            let i = s.find(&t.attribute).ok_or_else(|| {
                TextgenError::Config(format!("unknown attribute `{}`", t.attribute))
            })?;
            let found = find_placeholders(&t.text);
            if found != [placeholder(i).as_str()] {
                return Err(TextgenError::Config(format!(
                    "template `{}` must contain exactly the placeholder {}",
                    t.text,
                    placeholder(i)
                )));
            }
            let def = s.get(i);
            match &t.values {
                None => cover[i].iter_mut().for_each(|c| *c += 1),
                Some(vs) => {
                    for v in vs {
                        match def.value_index(v) {
                            Some(k) if k != def.na() => cover[i][k as usize] += 1,
                            _ => {
                                return Err(TextgenError::Config(format!(
                                    "template value `{v}` invalid for `{}`",
                                    def.name
                                )))
                            }
                        }
                    }
                }
            }
        }
        for (i, a) in s.attributes.iter().enumerate() {
            for (k, &c) in cover[i].iter().enumerate() {
                if c < 2 {
                    return Err(TextgenError::Config(format!(
                        "attribute `{}` value `{}` has {c} templates, need at least 2",
                        a.name, a.values[k]
                    )));
                }
                let ok = self
                    .surfaces
                    .get(&a.name)
                    .and_then(|m| m.get(&a.values[k]))
                    .is_some_and(|v| !v.is_empty());
                if !ok {
                    return Err(TextgenError::Config(format!(
                        "attribute `{}` value `{}` has no surface form",
                        a.name, a.values[k]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Templates usable for value `value` of attribute `attribute`.
    pub fn templates_for(&self, attribute: usize, value: u8) -> Vec<&Template> {
        let def = schema().get(attribute);
        let label = &def.values[value as usize];
        self.templates
            .iter()
            .filter(|t| {
                t.attribute == def.name && t.values.as_ref().is_none_or(|vs| vs.contains(label))
            })
            .collect()
    }

    pub fn surfaces_for(&self, attribute: usize, value: u8) -> &[String] {
        let def = schema().get(attribute);
        self.surfaces
            .get(&def.name)
            .and_then(|m| m.get(&def.values[value as usize]))
            .map_or(&[], Vec::as_slice)
    }
}
