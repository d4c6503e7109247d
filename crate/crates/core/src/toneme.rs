//! Mandarin toneme labels: syllable splitting into onset / toned nucleus /
//! coda, the label inventory, Praat TextGrid ingestion and rasterization
//! to frame-level label ids.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::features::{frame_count, AUDIO_HOP, AUDIO_WINDOW, FRAME_RATE};
use crate::signal::AUDIO_SAMPLE_RATE;

pub const SILENCE: &str = "sil";

const ONSETS: [&str; 23] = [
    "zh", "ch", "sh", "b", "p", "m", "f", "d", "t", "n", "l", "g", "k", "h", "j", "q", "x", "r",
    "z", "c", "s", "y", "w",
];
const CODAS: [&str; 2] = ["n", "ng"];

/// Standard pinyin syllable table without tones.
pub const PINYIN_TABLE: &str = "\
a ai an ang ao \
ba bai ban bang bao bei ben beng bi bian biao bie bin bing bo bu \
pa pai pan pang pao pei pen peng pi pian piao pie pin ping po pou pu \
ma mai man mang mao me mei men meng mi mian miao mie min ming miu mo mou mu \
fa fan fang fei fen feng fo fou fu \
da dai dan dang dao de dei den deng di dian diao die ding diu dong dou du duan dui dun duo \
ta tai tan tang tao te teng ti tian tiao tie ting tong tou tu tuan tui tun tuo \
na nai nan nang nao ne nei nen neng ni nian niang niao nie nin ning niu nong nou nu nuan nuo nü nüe \
la lai lan lang lao le lei leng li lia lian liang liao lie lin ling liu lo long lou lu luan lun luo lü lüe \
ga gai gan gang gao ge gei gen geng gong gou gu gua guai guan guang gui gun guo \
ka kai kan kang kao ke kei ken keng kong kou ku kua kuai kuan kuang kui kun kuo \
ha hai han hang hao he hei hen heng hong hou hu hua huai huan huang hui hun huo \
ji jia jian jiang jiao jie jin jing jiong jiu ju juan jue jun \
qi qia qian qiang qiao qie qin qing qiong qiu qu quan que qun \
xi xia xian xiang xiao xie xin xing xiong xiu xu xuan xue xun \
zha zhai zhan zhang zhao zhe zhei zhen zheng zhi zhong zhou zhu zhua zhuai zhuan zhuang zhui zhun zhuo \
cha chai chan chang chao che chen cheng chi chong chou chu chua chuai chuan chuang chui chun chuo \
sha shai shan shang shao she shei shen sheng shi shou shu shua shuai shuan shuang shui shun shuo \
ran rang rao re ren reng ri rong rou ru rua ruan rui run ruo \
za zai zan zang zao ze zei zen zeng zi zong zou zu zuan zui zun zuo \
ca cai can cang cao ce cen ceng ci cong cou cu cuan cui cun cuo \
sa sai san sang sao se sen seng si song sou su suan sui sun suo \
e ei en eng er o ou ê \
ya yan yang yao ye yi yin ying yo yong you yu yuan yue yun \
wa wai wan wang wei wen weng wo wu";

fn is_vowel(c: char) -> bool {
    matches!(c, 'a' | 'e' | 'i' | 'o' | 'u' | 'ü' | 'v' | 'ê')
}

/// Onset, toned nucleus and coda of one syllable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyllableSplit {
    pub onset: Option<String>,
    pub nucleus: String,
    pub tone: u8,
    pub coda: Option<String>,
}

impl SyllableSplit {
    pub fn tonemes(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(3);
        if let Some(o) = &self.onset {
            out.push(o.clone());
        }
        out.push(format!("{}{}", self.nucleus, self.tone));
        if let Some(c) = &self.coda {
            out.push(c.clone());
        }
        out
    }

    /// The syllable without its tone digit.
    pub fn toneless(&self) -> String {
        format!(
            "{}{}{}",
            self.onset.as_deref().unwrap_or(""),
            self.nucleus,
            self.coda.as_deref().unwrap_or("")
        )
    }
}

pub fn parse_syllable(syllable: &str) -> Result<SyllableSplit> {
    let s = syllable.trim();
    let tone_char = s
        .chars()
        .last()
        .ok_or_else(|| invalid("empty syllable"))?;
    let tone = match tone_char.to_digit(10) {
        Some(t @ 1..=5) => t as u8,
        _ => {
            return Err(invalid(format!(
                "syllable `{s}` must end in a tone digit 1-5"
            )))
        }
    };
    let body = &s[..s.len() - tone_char.len_utf8()];

    let mut rest = body;
    let mut onset = None;
    if body != "er" {
        for o in ONSETS {
            if let Some(r) = body.strip_prefix(o) {
                if r.chars().next().is_some_and(is_vowel) {
                    onset = Some(o.to_string());
                    rest = r;
                    break;
                }
            }
        }
    }

    let (nucleus, coda) = if rest == "er" {
        ("er", "")
    } else {
        let split = rest
            .char_indices()
            .find(|&(_, c)| !is_vowel(c))
            .map_or(rest.len(), |(i, _)| i);
        rest.split_at(split)
    };
    if nucleus.is_empty() {
        return Err(invalid(format!("syllable `{s}` has no vowel")));
    }
    if !coda.is_empty() && !CODAS.contains(&coda) {
        return Err(invalid(format!(
            "syllable `{s}` has unsupported coda `{coda}`"
        )));
    }
    Ok(SyllableSplit {
        onset,
        nucleus: nucleus.to_string(),
        tone,
        coda: (!coda.is_empty()).then(|| coda.to_string()),
    })
}

/// `"teng2"` becomes `["t", "e2", "ng"]`.
pub fn split_syllable(syllable: &str) -> Result<Vec<String>> {
    Ok(parse_syllable(syllable)?.tonemes())
}

/// Tone digit carried by a toneme label, if it is a nucleus.
pub fn tone_of(label: &str) -> Option<u8> {
    label
        .chars()
        .last()
        .and_then(|c| c.to_digit(10))
        .filter(|t| (1..=5).contains(t))
        .map(|t| t as u8)
}

/// Ordered label set; index 0 is silence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TonemeSet {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl TonemeSet {
    pub fn from_labels(labels: Vec<String>) -> Result<Self> {
        if labels.first().map(String::as_str) != Some(SILENCE) {
            return Err(invalid("toneme set must start with the silence label"));
        }
        let mut index = HashMap::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            if index.insert(l.clone(), i).is_some() {
                return Err(invalid(format!("duplicate toneme label `{l}`")));
            }
        }
        Ok(Self { labels, index })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, id: usize) -> Option<&str> {
        self.labels.get(id).map(String::as_str)
    }

    /// Id for an alignment label; empty and pause labels map to silence.
    pub fn id_for_alignment(&self, label: &str) -> Result<usize> {
        let l = label.trim();
        if l.is_empty() || matches!(l, "sil" | "sp" | "spn" | "<eps>") {
            return Ok(0);
        }
        self.id(l).ok_or_else(|| Error::UnknownLabel(l.to_string()))
    }

    pub fn tone_of_id(&self, id: usize) -> Option<u8> {
        self.label(id).filter(|_| id != 0).and_then(tone_of)
    }

    /// The same inventory with tone digits stripped, plus the id mapping
    /// from this set into it. Used when tones are disabled for the classifier.
    pub fn toneless(&self) -> (TonemeSet, Vec<usize>) {
        let strip = |l: &str| -> String {
            match tone_of(l) {
                Some(_) => l[..l.len() - 1].to_string(),
                None => l.to_string(),
            }
        };
        let mut rest: Vec<String> = self.labels[1..].iter().map(|l| strip(l)).collect();
        rest.sort();
        rest.dedup();
        let mut labels = vec![SILENCE.to_string()];
        labels.extend(rest);
        let set = TonemeSet::from_labels(labels).expect("stripping keeps silence first and unique");
        let map = self
            .labels
            .iter()
            .map(|l| set.id(&strip(l)).expect("every stripped label is present"))
            .collect();
        (set, map)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.labels.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_labels(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect(),
        )
    }
}

/// Union of all tonemes of the lexicon, sorted, with silence prepended.
pub fn build_inventory<S: AsRef<str>>(lexicon: &[S]) -> Result<TonemeSet> {
    if lexicon.is_empty() {
        return Err(invalid("empty lexicon"));
    }
    let mut set = BTreeSet::new();
    for s in lexicon {
        set.extend(split_syllable(s.as_ref())?);
    }
    let mut labels = vec![SILENCE.to_string()];
    labels.extend(set);
    TonemeSet::from_labels(labels)
}

/// Every syllable of [`PINYIN_TABLE`] with each of the five tones.
pub fn full_lexicon() -> Vec<String> {
    PINYIN_TABLE
        .split_whitespace()
        .flat_map(|s| (1..=5).map(move |t| format!("{s}{t}")))
        .collect()
}

pub fn full_inventory() -> TonemeSet {
    build_inventory(&full_lexicon()).expect("the built-in pinyin table splits cleanly")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
    pub label: String,
}

/// Labelled intervals of one alignment tier.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentIntervals {
    pub intervals: Vec<Interval>,
    pub total_duration: f64,
}

impl AlignmentIntervals {
    pub fn new(intervals: Vec<Interval>, total_duration: f64) -> Result<Self> {
        let mut prev_end = 0.0;
        for iv in &intervals {
            if !(iv.start.is_finite() && iv.end.is_finite()) || iv.end < iv.start {
                return Err(invalid(format!(
                    "interval `{}` has end {} before start {}",
                    iv.label, iv.end, iv.start
                )));
            }
            if iv.start < prev_end - 1e-9 || iv.start < -1e-9 || iv.end > total_duration + 1e-9 {
                return Err(invalid(format!(
                    "interval `{}` [{}, {}] overlaps or leaves [0, {total_duration}]",
                    iv.label, iv.start, iv.end
                )));
            }
            prev_end = iv.end;
        }
        Ok(Self {
            intervals,
            total_duration,
        })
    }

    /// Long-format TextGrid with a single interval tier named `phones`.
    pub fn to_textgrid(&self) -> String {
        let mut s = String::new();
        s.push_str("File type = \"ooTextFile\"\nObject class = \"TextGrid\"\n\n");
        s.push_str(&format!("xmin = 0\nxmax = {}\ntiers? <exists>\nsize = 1\nitem []:\n", self.total_duration));
        s.push_str("    item [1]:\n        class = \"IntervalTier\"\n        name = \"phones\"\n");
        s.push_str(&format!(
            "        xmin = 0\n        xmax = {}\n        intervals: size = {}\n",
            self.total_duration,
            self.intervals.len()
        ));
        for (k, iv) in self.intervals.iter().enumerate() {
            s.push_str(&format!(
                "        intervals [{}]:\n            xmin = {}\n            xmax = {}\n            text = \"{}\"\n",
                k + 1,
                iv.start,
                iv.end,
                iv.label.replace('"', "\"\"")
            ));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Str(String),
    Num(f64),
    Flag(bool),
}

/// Value tokens of a TextGrid in either long or short text format. Keys,
/// `=`, `:` and bracketed item indices are skipped, so both formats reduce
/// to the same value stream.
fn tokenize(text: &str) -> Result<Vec<(Tok, usize)>> {
    let mut out = Vec::new();
    let mut chars = text.chars().peekable();
    let mut line = 1;
    while let Some(&c) = chars.peek() {
        match c {
            '\n' => {
                line += 1;
                chars.next();
            }
            '"' => {
                chars.next();
                let start_line = line;
                let mut s = String::new();
                loop {
                    match chars.next() {
                        None => {
                            return Err(Error::Parse {
                                line: start_line,
                                msg: "unterminated string".into(),
                            })
                        }
                        Some('"') if chars.peek() == Some(&'"') => {
                            chars.next();
                            s.push('"');
                        }
                        Some('"') => break,
                        Some(ch) => {
                            if ch == '\n' {
                                line += 1;
                            }
                            s.push(ch);
                        }
                    }
                }
                out.push((Tok::Str(s), start_line));
            }
            '[' => {
                for ch in chars.by_ref() {
                    if ch == ']' {
                        break;
                    }
                }
            }
            '<' => {
                chars.next();
                let mut w = String::new();
                for ch in chars.by_ref() {
                    if ch == '>' {
                        break;
                    }
                    w.push(ch);
                }
                out.push((Tok::Flag(w == "exists"), line));
            }
            '!' => {
                while chars.peek().is_some_and(|&ch| ch != '\n') {
                    chars.next();
                }
            }
            c if c.is_ascii_digit() || c == '-' || c == '+' || c == '.' => {
                let mut w = String::new();
                while let Some(&ch) = chars.peek() {
                    if ch.is_ascii_digit() || matches!(ch, '-' | '+' | '.' | 'e' | 'E') {
                        w.push(ch);
                        chars.next();
                    } else {
                        break;
                    }
                }
                let v = w.parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    msg: format!("bad number `{w}`"),
                })?;
                out.push((Tok::Num(v), line));
            }
            c if c.is_alphabetic() => {
                // key names such as `xmin`, `intervals`, `tiers?`
                while chars
                    .peek()
                    .is_some_and(|&ch| ch.is_alphanumeric() || ch == '?' || ch == '_')
                {
                    chars.next();
                }
            }
            _ => {
                chars.next();
            }
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
}

struct Tier {
    name: String,
    intervals: Vec<Interval>,
}

impl Parser {
    fn line(&self) -> usize {
        self.toks
            .get(self.pos)
            .or_else(|| self.toks.last())
            .map_or(1, |t| t.1)
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line(),
            msg: msg.into(),
        }
    }

    fn next(&mut self, what: &str) -> Result<Tok> {
        let t = self
            .toks
            .get(self.pos)
            .map(|t| t.0.clone())
            .ok_or_else(|| self.err(format!("unexpected end of file, expected {what}")))?;
        self.pos += 1;
        Ok(t)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        match self.next(what)? {
            Tok::Str(s) => Ok(s),
            _ => {
                self.pos -= 1;
                Err(self.err(format!("expected string for {what}")))
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<f64> {
        match self.next(what)? {
            Tok::Num(v) => Ok(v),
            _ => {
                self.pos -= 1;
                Err(self.err(format!("expected number for {what}")))
            }
        }
    }

    fn count(&mut self, what: &str) -> Result<usize> {
        let v = self.number(what)?;
        if v < 0.0 || v.fract() != 0.0 {
            return Err(self.err(format!("{what} must be a non-negative integer")));
        }
        Ok(v as usize)
    }

    fn header(&mut self) -> Result<(f64, f64, usize)> {
        if self.string("file type")? != "ooTextFile" {
            return Err(self.err("not an ooTextFile"));
        }
        if self.string("object class")? != "TextGrid" {
            return Err(self.err("object class is not TextGrid"));
        }
        let xmin = self.number("xmin")?;
        let xmax = self.number("xmax")?;
        match self.next("tiers flag")? {
            Tok::Flag(true) => {}
            _ => return Err(self.err("expected <exists>")),
        }
        let n = self.count("tier count")?;
        Ok((xmin, xmax, n))
    }

    fn tier(&mut self) -> Result<Option<Tier>> {
        let class = self.string("tier class")?;
        let name = self.string("tier name")?;
        let _xmin = self.number("tier xmin")?;
        let _xmax = self.number("tier xmax")?;
        let n = self.count("interval count")?;
        match class.as_str() {
            "IntervalTier" => {
                let mut intervals = Vec::with_capacity(n);
                for k in 0..n {
                    let ctx = format!("interval {} of tier `{name}`", k + 1);
                    let start = self.number(&format!("{ctx} xmin")).map_err(|_| self.unclosed(&ctx))?;
                    let end = self.number(&format!("{ctx} xmax")).map_err(|_| self.unclosed(&ctx))?;
                    let label = self.string(&format!("{ctx} text")).map_err(|_| self.unclosed(&ctx))?;
                    if end < start {
                        return Err(self.err(format!("{ctx}: xmax {end} < xmin {start}")));
                    }
                    if let Some(prev) = intervals.last().map(|iv: &Interval| iv.end) {
                        if start < prev - 1e-9 {
                            return Err(self.err(format!("{ctx}: starts at {start} before previous end {prev}")));
                        }
                    }
                    intervals.push(Interval { start, end, label });
                }
                Ok(Some(Tier { name, intervals }))
            }
            "TextTier" => {
                for k in 0..n {
                    let ctx = format!("point {} of tier `{name}`", k + 1);
                    self.number(&ctx).map_err(|_| self.unclosed(&ctx))?;
                    self.string(&ctx).map_err(|_| self.unclosed(&ctx))?;
                }
                Ok(None)
            }
            other => Err(self.err(format!("unknown tier class `{other}`"))),
        }
    }

    fn unclosed(&self, ctx: &str) -> Error {
        self.err(format!("unclosed or malformed {ctx}"))
    }
}

/// Parses a Praat TextGrid (long or short text format) and returns the
/// interval tier named `phones`; a file with a single interval tier yields
/// that tier whatever its name.
pub fn parse_textgrid(text: &str) -> Result<AlignmentIntervals> {
    let mut p = Parser {
        toks: tokenize(text)?,
        pos: 0,
    };
    let (xmin, xmax, n) = p.header()?;
    if xmax < xmin {
        return Err(p.err("TextGrid xmax < xmin"));
    }
    let mut tiers = Vec::new();
    for _ in 0..n {
        if let Some(t) = p.tier()? {
            tiers.push(t);
        }
    }
    let pick = match tiers.iter().position(|t| t.name == "phones") {
        Some(i) => i,
        None if tiers.len() == 1 => 0,
        None => return Err(invalid("TextGrid has no interval tier named `phones`")),
    };
    let tier = tiers.swap_remove(pick);
    AlignmentIntervals::new(tier.intervals, xmax - xmin)
}

/// Frame count expected for audio of the given duration with the mel
/// analysis framing.
pub fn expected_frames(duration_s: f64) -> usize {
    let samples = (duration_s * AUDIO_SAMPLE_RATE).round() as usize;
    frame_count(samples, AUDIO_WINDOW, AUDIO_HOP).unwrap_or(0)
}

/// Frame-level toneme ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TonemeLabelSequence {
    pub ids: Vec<usize>,
}

impl TonemeLabelSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Frame `j` (0-based) takes the label of the interval covering its
/// center time `(j + 0.5) / 62.5` s; uncovered frames are silence.
pub fn rasterize(
    intervals: &AlignmentIntervals,
    frames: usize,
    set: &TonemeSet,
) -> Result<TonemeLabelSequence> {
    let expected = expected_frames(intervals.total_duration);
    if !intervals.intervals.is_empty() && frames.abs_diff(expected) > 2 {
        return Err(invalid(format!(
            "{frames} frames inconsistent with {} s of audio ({expected} frames)",
            intervals.total_duration
        )));
    }
    let ids: Vec<usize> = intervals
        .intervals
        .iter()
        .map(|iv| set.id_for_alignment(&iv.label))
        .collect::<Result<_>>()?;
    let mut out = vec![0usize; frames];
    let mut k = 0;
    for (j, slot) in out.iter_mut().enumerate() {
        let t = (j as f64 + 0.5) / FRAME_RATE;
        while k < intervals.intervals.len() && intervals.intervals[k].end < t {
            k += 1;
        }
        if let Some(iv) = intervals.intervals.get(k) {
            if iv.start <= t {
                *slot = ids[k];
            }
        }
    }
    Ok(TonemeLabelSequence { ids: out })
}

/// One transcript line: `id<TAB>pinyin syllables<TAB>characters`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transcript {
    pub id: String,
    pub syllables: Vec<String>,
    pub characters: String,
}

impl Transcript {
    pub fn to_line(&self) -> String {
        format!("{}\t{}\t{}", self.id, self.syllables.join(" "), self.characters)
    }

    pub fn parse_line(line: &str, line_no: usize) -> Result<Self> {
        let mut parts = line.split('\t');
        let (Some(id), Some(py), Some(chars), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(Error::Parse {
                line: line_no,
                msg: "expected `id<TAB>pinyin<TAB>characters`".into(),
            });
        };
        Ok(Self {
            id: id.to_string(),
            syllables: py.split_whitespace().map(String::from).collect(),
            characters: chars.to_string(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let line = text
            .lines()
            .find(|l| !l.trim().is_empty())
            .ok_or_else(|| Error::Parse {
                line: 1,
                msg: "empty transcript".into(),
            })?;
        Self::parse_line(line, 1)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, format!("{}\n", self.to_line())).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {

    #[test]
    fn toneless_projection() {
        let set = build_inventory(&["teng2", "teng4", "ba1"]).unwrap();
        let (plain, map) = set.toneless();
        assert_eq!(plain.labels(), &["sil", "a", "b", "e", "ng", "t"]);
        assert_eq!(map[0], 0);
        assert_eq!(map[set.id("e2").unwrap()], map[set.id("e4").unwrap()]);
        assert_eq!(plain.label(map[set.id("a1").unwrap()]), Some("a"));
    }
    use super::*;

    #[test]
    fn splits_follow_the_onset_nucleus_coda_rule() {
        assert_eq!(split_syllable("teng2").unwrap(), ["t", "e2", "ng"]);
        assert_eq!(split_syllable("ba1").unwrap(), ["b", "a1"]);
        assert_eq!(split_syllable("an4").unwrap(), ["a4", "n"]);
        assert_eq!(split_syllable("zhuang5").unwrap(), ["zh", "ua5", "ng"]);
        assert_eq!(split_syllable("er2").unwrap(), ["er2"]);
        assert_eq!(split_syllable("nüe4").unwrap(), ["n", "üe4"]);
        assert_eq!(split_syllable("yuan2").unwrap(), ["y", "ua2", "n"]);
    }

    #[test]
    fn malformed_syllables_are_rejected() {
        assert!(split_syllable("ng2").is_err());
        assert!(split_syllable("ba").is_err());
        assert!(split_syllable("ba6").is_err());
        assert!(split_syllable("bar3").is_err());
        assert!(split_syllable("").is_err());
    }

    #[test]
    fn rejoining_reproduces_toneless_syllable() {
        for s in full_lexicon() {
            let split = parse_syllable(&s).unwrap();
            assert_eq!(split.toneless(), s[..s.len() - 1]);
        }
    }

    #[test]
    fn inventory_from_lexicon() {
        let set = build_inventory(&["teng2"]).unwrap();
        assert_eq!(set.labels(), ["sil", "e2", "ng", "t"]);
        assert_eq!(set.len(), 4);
        let dup = build_inventory(&["ba1", "teng2", "ba1"]).unwrap();
        assert_eq!(dup, build_inventory(&["ba1", "teng2"]).unwrap());
        assert!(build_inventory::<&str>(&[]).is_err());
        assert!(build_inventory(&["xx1"]).is_err());
    }

    #[test]
    fn full_inventory_size_is_close_to_139_plus_silence() {
        // brute-force enumeration, independent of build_inventory
        let mut labels = BTreeSet::new();
        for s in full_lexicon() {
            for t in split_syllable(&s).unwrap() {
                labels.insert(t);
            }
        }
        let set = full_inventory();
        assert_eq!(set.len(), labels.len() + 1);
        assert_eq!(set.id(SILENCE), Some(0));
        assert!(set.len().abs_diff(140) <= 2, "size {}", set.len());
    }

    #[test]
    fn inventory_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tonemes.txt");
        let set = build_inventory(&["ma3", "teng2"]).unwrap();
        set.save(&path).unwrap();
        assert_eq!(TonemeSet::load(&path).unwrap(), set);
    }

    const ONE_INTERVAL: &str = r#"File type = "ooTextFile"
Object class = "TextGrid"

xmin = 0
xmax = 0.5
tiers? <exists>
size = 1
item []:
    item [1]:
        class = "IntervalTier"
        name = "phones"
        xmin = 0
        xmax = 0.5
        intervals: size = 1
        intervals [1]:
            xmin = 0
            xmax = 0.5
            text = "t"
"#;

    #[test]
    fn parses_single_interval() {
        let a = parse_textgrid(ONE_INTERVAL).unwrap();
        assert_eq!(
            a.intervals,
            vec![Interval {
                start: 0.0,
                end: 0.5,
                label: "t".into()
            }]
        );
        assert_eq!(a.total_duration, 0.5);
    }

    #[test]
    fn picks_phone_tier_of_two_in_short_format() {
        let text = "File type = \"ooTextFile\"\nObject class = \"TextGrid\"\n\n0\n1\n<exists>\n2\n\
            \"IntervalTier\"\n\"words\"\n0\n1\n1\n0\n1\n\"teng2\"\n\
            \"IntervalTier\"\n\"phones\"\n0\n1\n3\n0\n0.2\n\"t\"\n0.2\n0.8\n\"e2\"\n0.8\n1\n\"ng\"\n";
        let a = parse_textgrid(text).unwrap();
        let labels: Vec<&str> = a.intervals.iter().map(|i| i.label.as_str()).collect();
        assert_eq!(labels, ["t", "e2", "ng"]);
    }

    #[test]
    fn rejects_broken_textgrids() {
        let reversed = ONE_INTERVAL.replace("xmax = 0.5\n            text", "xmax = -0.1\n            text");
        assert!(parse_textgrid(&reversed).is_err());
        let truncated = &ONE_INTERVAL[..ONE_INTERVAL.len() - 22];
        assert!(matches!(parse_textgrid(truncated), Err(Error::Parse { .. })));
        assert!(parse_textgrid("File type = \"ooTextFile\"\nObject class = \"Sound\"\n").is_err());
        let quote = ONE_INTERVAL.replace("text = \"t\"", "text = \"t");
        assert!(parse_textgrid(&quote).is_err());
    }

    #[test]
    fn textgrid_writer_round_trips() {
        let a = AlignmentIntervals::new(
            vec![
                Interval { start: 0.0, end: 0.1, label: "".into() },
                Interval { start: 0.1, end: 0.3, label: "m".into() },
                Interval { start: 0.3, end: 0.6, label: "a3".into() },
            ],
            0.6,
        )
        .unwrap();
        assert_eq!(parse_textgrid(&a.to_textgrid()).unwrap(), a);
    }

    #[test]
    fn rasterization() {
        let set = build_inventory(&["ta1"]).unwrap();
        let empty = AlignmentIntervals::new(vec![], 0.2).unwrap();
        assert_eq!(rasterize(&empty, 10, &set).unwrap().ids, vec![0; 10]);

        // frames of 0.125 s of audio at this framing: 1 + (2000 - 1024) / 256 = 4
        let dur = 0.125;
        assert_eq!(expected_frames(dur), 4);
        let full = AlignmentIntervals::new(
            vec![Interval { start: 0.0, end: dur, label: "t".into() }],
            dur,
        )
        .unwrap();
        let t = set.id("t").unwrap();
        assert_eq!(rasterize(&full, 4, &set).unwrap().ids, vec![t; 4]);

        // centers 8, 24, 40, 56 ms all fall inside [0, 64 ms]
        let first = AlignmentIntervals::new(
            vec![Interval { start: 0.0, end: 0.064, label: "a1".into() }],
            dur,
        )
        .unwrap();
        let a1 = set.id("a1").unwrap();
        assert_eq!(rasterize(&first, 4, &set).unwrap().ids, vec![a1; 4]);

        let unknown = AlignmentIntervals::new(
            vec![Interval { start: 0.0, end: dur, label: "zz".into() }],
            dur,
        )
        .unwrap();
        assert!(matches!(rasterize(&unknown, 4, &set), Err(Error::UnknownLabel(_))));
        assert!(rasterize(&full, 40, &set).is_err());
    }

    #[test]
    fn transcript_lines() {
        let t = Transcript {
            id: "utt1".into(),
            syllables: vec!["ni3".into(), "hao3".into()],
            characters: "你好".into(),
        };
        assert_eq!(Transcript::parse_line(&t.to_line(), 1).unwrap(), t);
        assert!(Transcript::parse_line("a\tb", 3).is_err());
    }
}
