//! Synthetic restaurant/hotel/taxi dialogues with gold annotations for all
//! four downstream tasks.
//!
//! Each dialogue follows a small goal-driven script: the user reveals
//! constraints, the system requests what is missing, recommends, books and
//! closes. Every system turn carries its act labels and every user turn the
//! cumulative belief state, so the same draw yields intent, state-tracking,
//! act-prediction and response-selection examples.

use std::collections::BTreeMap;

use divtod_core::downstream::{ActExample, DstExample, IntentExample, Ontology, RsExample, NONE_VALUE};
use divtod_core::rng::{self, Rng};
use divtod_core::{Corpus, Dialogue, Role, Utterance};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub const DATASET: &str = "synthetic-tod";

pub const ACTS: [&str; 8] = ["greet", "request", "inform", "recommend", "book", "confirm", "reqmore", "bye"];

pub const INTENTS: [&str; 4] = ["find_restaurant", "find_hotel", "book_taxi", "out_of_scope"];
pub const OOD_INTENT: usize = 3;

struct Domain {
    name: &'static str,
    intent: usize,
    slots: &'static [(&'static str, &'static [&'static str])],
    names: &'static [&'static str],
}

const AREAS: &[&str] = &["north", "south", "east", "west", "centre"];
const PRICES: &[&str] = &["cheap", "moderate", "expensive"];

const DOMAINS: [Domain; 3] = [
    Domain {
        name: "restaurant",
        intent: 0,
        slots: &[("area", AREAS), ("food", &["italian", "chinese", "indian", "french", "thai"]), ("pricerange", PRICES)],
        names: &["the golden wok", "pizza place", "curry garden", "le bistro", "bangkok house", "the copper pot"],
    },
    Domain {
        name: "hotel",
        intent: 1,
        slots: &[("area", AREAS), ("pricerange", PRICES), ("stars", &["2", "3", "4", "5"])],
        names: &["the grand", "river lodge", "city inn", "park view hotel", "the acorn guest house"],
    },
    Domain {
        name: "taxi",
        intent: 2,
        slots: &[("destination", &["station", "airport", "museum", "cinema", "hospital"]), ("leaveat", &["morning", "noon", "evening", "night"])],
        names: &["a red toyota", "a white skoda", "a black volvo", "a blue ford"],
    },
];

fn opening(domain: &str) -> &'static [&'static str] {
    match domain {
        "restaurant" => &["i am looking for a restaurant", "i need a place to eat", "can you help me find a restaurant", "i want somewhere to have dinner"],
        "hotel" => &["i am looking for a hotel", "i need a place to stay", "can you help me find a hotel", "i want to book a room somewhere"],
        _ => &["i need a taxi", "can you book me a cab", "i want to get a taxi", "please order me a taxi"],
    }
}

fn slot_phrase(slot: &str, value: &str, r: &mut Rng) -> String {
    let options: Vec<String> = match slot {
        "area" => vec![format!("in the {value}"), format!("somewhere in the {value}"), format!("in the {value} part of town")],
        "food" => vec![format!("serving {value} food"), format!("that does {value} food"), format!("with {value} cuisine")],
        "pricerange" => vec![format!("in the {value} price range"), format!("that is {value}"), format!("something {value}")],
        "stars" => vec![format!("with {value} stars"), format!("rated {value} stars")],
        "destination" => vec![format!("to the {value}"), format!("going to the {value}")],
        _ => vec![format!("leaving in the {value}"), format!("at {value}"), format!("for the {value}")],
    };
    options.choose(r).cloned().unwrap_or_default()
}

fn request_question(slot: &str, r: &mut Rng) -> String {
    let options: &[&str] = match slot {
        "area" => &["what area would you like", "which part of town do you prefer", "do you have an area in mind"],
        "food" => &["what type of food would you like", "which cuisine are you after", "any preference on food"],
        "pricerange" => &["what price range are you looking for", "do you have a budget in mind", "how much would you like to spend"],
        "stars" => &["how many stars should it have", "what star rating would you like"],
        "destination" => &["where would you like to go", "what is your destination"],
        _ => &["when would you like to leave", "what time should the taxi come"],
    };
    options.choose(r).map(|s| s.to_string()).unwrap_or_default()
}

fn reference(r: &mut Rng) -> String {
    const ALPHABET: &[u8] = b"abcdefghjkmnpqrstuvwxyz23456789";
    (0..6).map(|_| ALPHABET[r.random_range(0..ALPHABET.len())] as char).collect()
}

const OOD_UTTERANCES: &[&str] = &[
    "what is the weather like tomorrow",
    "tell me a joke",
    "play some music",
    "set an alarm for six",
    "how tall is the tallest mountain",
    "what is the capital of peru",
    "remind me to call my mother",
    "how do i reset my password",
    "translate hello into spanish",
    "what is the score of the game",
    "turn off the lights",
    "how many ounces are in a pound",
];

/// One generated dialogue with its gold annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotated {
    pub dialogue: Dialogue,
    pub intent: usize,
    /// Belief state after each user turn.
    pub states: Vec<BTreeMap<String, String>>,
    /// Act labels of each system turn.
    pub acts: Vec<Vec<String>>,
}

fn key(domain: &str, slot: &str) -> String {
    format!("{domain}-{slot}")
}

/// Draws one dialogue.
pub fn dialogue(id: &str, r: &mut Rng) -> Annotated {
    let domain = &DOMAINS[r.random_range(0..DOMAINS.len())];
    let goal: Vec<(&str, &str)> = domain.slots.iter().map(|(s, vals)| (*s, *vals.choose(r).expect("non-empty values"))).collect();
    let mut pending: Vec<usize> = (0..goal.len()).collect();
    pending.shuffle(r);
    let mut state: BTreeMap<String, String> = BTreeMap::new();
    let mut turns: Vec<(Role, String)> = Vec::new();
    let mut states = Vec::new();
    let mut acts = Vec::new();

    // opening: intent plus up to two constraints
    let mut first = opening(domain.name).choose(r).expect("openings").to_string();
    let reveal = r.random_range(0..=pending.len().min(2));
    for _ in 0..reveal {
        let i = pending.pop().expect("counted");
        first.push(' ');
        first.push_str(&slot_phrase(goal[i].0, goal[i].1, r));
        state.insert(key(domain.name, goal[i].0), goal[i].1.to_string());
    }
    turns.push((Role::User, first));
    states.push(state.clone());

    // at most one clarifying question per missing slot, sometimes skipped
    while let Some(&i) = pending.last() {
        if r.random_bool(0.25) {
            break;
        }
        pending.pop();
        let ask = request_question(goal[i].0, r);
        let sys = if r.random_bool(0.3) { format!("sure . {ask}") } else { ask };
        turns.push((Role::System, sys));
        acts.push(vec!["request".to_string()]);
        let answer = slot_phrase(goal[i].0, goal[i].1, r);
        let user = if r.random_bool(0.5) { format!("{answer} please") } else { answer };
        turns.push((Role::User, user));
        state.insert(key(domain.name, goal[i].0), goal[i].1.to_string());
        states.push(state.clone());
    }

    let name = *domain.names.choose(r).expect("names");
    let mentioned: Vec<&str> = goal.iter().filter(|(s, _)| state.contains_key(&key(domain.name, s))).map(|(_, v)| *v).collect();
    let detail = mentioned.choose(r).copied().unwrap_or("good");
    if domain.name == "taxi" {
        let dest = state.get(&key("taxi", "destination")).cloned().unwrap_or_else(|| "your destination".to_string());
        let sys = [format!("i have booked {name} to take you to the {dest}"), format!("{name} will pick you up and drive you to the {dest}")];
        turns.push((Role::System, sys.choose(r).expect("two").clone()));
        acts.push(vec!["book".to_string(), "inform".to_string()]);
        let user = ["what is the contact number", "can i have the phone number", "how do i contact the driver"];
        turns.push((Role::User, user.choose(r).expect("three").to_string()));
        states.push(state.clone());
        let phone: String = (0..8).map(|_| char::from(b'0' + r.random_range(0..10u8))).collect();
        turns.push((Role::System, format!("the contact number is {phone} . anything else")));
        acts.push(vec!["inform".to_string(), "reqmore".to_string()]);
    } else {
        let sys = [
            format!("i recommend {name} , it is {detail}"),
            format!("how about {name} ? it is {detail}"),
            format!("{name} is a {detail} option you might like"),
        ];
        turns.push((Role::System, sys.choose(r).expect("three").clone()));
        acts.push(vec!["recommend".to_string(), "inform".to_string()]);
        let user = ["that sounds good , please book it", "great , can you book it for me", "yes please make a reservation"];
        turns.push((Role::User, user.choose(r).expect("three").to_string()));
        states.push(state.clone());
        let reference = reference(r);
        let booked = [
            format!("booking was successful . your reference number is {reference}"),
            format!("i have made the booking , the reference is {reference}"),
            format!("done . reference number {reference} . can i help with anything else"),
        ];
        let i = r.random_range(0..booked.len());
        turns.push((Role::System, booked[i].clone()));
        acts.push(if i == 2 { vec!["book".to_string(), "reqmore".to_string()] } else { vec!["book".to_string(), "confirm".to_string()] });
    }

    let bye_user = ["no , that is all . thanks", "thank you , goodbye", "that is everything , thanks"];
    turns.push((Role::User, bye_user.choose(r).expect("three").to_string()));
    states.push(state.clone());
    let bye_sys = ["you are welcome . goodbye", "have a nice day", "glad i could help . bye"];
    turns.push((Role::System, bye_sys.choose(r).expect("three").to_string()));
    acts.push(vec!["bye".to_string()]);

    let dialogue = Dialogue::normalize(id, DATASET, vec![domain.name.to_string()], &turns).expect("script alternates and ends on the system");
    debug_assert_eq!(dialogue.num_system_turns(), acts.len());
    Annotated { dialogue, intent: domain.intent, states, acts }
}

/// `n` dialogues with ids `{prefix}-{i:04}`.
pub fn dialogues(n: usize, prefix: &str, seed: u64) -> Vec<Annotated> {
    let mut r = rng::derived(seed, &format!("synth/{prefix}"));
    (0..n).map(|i| dialogue(&format!("{prefix}-{i:04}"), &mut r)).collect()
}

pub fn ontology() -> Ontology {
    let mut map = BTreeMap::new();
    for d in &DOMAINS {
        for (slot, values) in d.slots {
            let mut v = vec![NONE_VALUE.to_string()];
            v.extend(values.iter().map(|s| s.to_string()));
            map.insert(key(d.name, slot), v);
        }
    }
    Ontology(map)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TaskSets {
    pub intent: Vec<IntentExample>,
    pub dst: Vec<DstExample>,
    pub act: Vec<ActExample>,
    pub rs: Vec<RsExample>,
}

/// Task examples derived from annotated dialogues. Intent examples come
/// from opening user turns plus `ood` out-of-scope utterances.
pub fn task_sets(items: &[Annotated], ood: usize, r: &mut Rng) -> TaskSets {
    let mut out = TaskSets::default();
    let ont = ontology();
    for a in items {
        let turns = a.dialogue.turns();
        out.intent.push(IntentExample { utterance: turns[0].text.clone(), label: a.intent, is_ood: false });
        for (i, sys_acts) in a.acts.iter().enumerate() {
            let history: Vec<Utterance> = turns[..2 * i + 1].to_vec();
            let mut labels = a.states[i].clone();
            for k in ont.0.keys() {
                labels.entry(k.clone()).or_insert_with(|| NONE_VALUE.to_string());
            }
            out.dst.push(DstExample { history: history.clone(), labels });
            out.act.push(ActExample { history: history.clone(), acts: ACTS.iter().map(|x| sys_acts.iter().any(|y| y == x)).collect() });
            out.rs.push(RsExample { history, gold_response: turns[2 * i + 1].text.clone(), gold_acts: sys_acts.clone() });
        }
    }
    for _ in 0..ood {
        let base = *OOD_UTTERANCES.choose(r).expect("non-empty");
        let utterance = if r.random_bool(0.5) { format!("{base} please") } else { base.to_string() };
        out.intent.push(IntentExample { utterance, label: OOD_INTENT, is_ood: true });
    }
    out.intent.shuffle(r);
    out
}

/// Three intents keyed on disjoint vocabularies, so a summary-vector
/// classifier can separate them.
pub fn separable_intents(n: usize, seed: u64) -> Vec<IntentExample> {
    const CLASS_WORDS: [&[&str]; 3] = [&["pizza", "pasta", "sushi", "noodles"], &["hotel", "room", "suite", "bed"], &["taxi", "cab", "driver", "car"]];
    const FILLER: &[&str] = &["please", "i", "want", "a", "now", "the", "need", "some"];
    let mut r = rng::derived(seed, "synth/separable");
    (0..n)
        .map(|i| {
            let label = i % 3;
            let mut words: Vec<&str> = (0..3).map(|_| *FILLER.choose(&mut r).expect("filler")).collect();
            words.insert(r.random_range(0..=words.len()), CLASS_WORDS[label].choose(&mut r).expect("class words"));
            IntentExample { utterance: words.join(" "), label, is_ood: false }
        })
        .collect()
}

/// Everything `ingest --synthetic` writes.
pub struct Bundle {
    pub train: Vec<Annotated>,
    pub dev: Vec<Annotated>,
    pub test: Vec<Annotated>,
    pub tasks_train: TaskSets,
    pub tasks_dev: TaskSets,
    pub tasks_test: TaskSets,
}

impl Bundle {
    pub fn generate(n_train: usize, n_dev: usize, n_test: usize, seed: u64) -> Self {
        let train = dialogues(n_train, "train", seed);
        let dev = dialogues(n_dev, "dev", seed);
        let test = dialogues(n_test, "test", seed);
        let mut r = rng::derived(seed, "synth/tasks");
        let tasks_train = task_sets(&train, n_train / 4, &mut r);
        let tasks_dev = task_sets(&dev, n_dev / 4, &mut r);
        let tasks_test = task_sets(&test, n_test / 4, &mut r);
        Self { train, dev, test, tasks_train, tasks_dev, tasks_test }
    }

    pub fn corpus(items: &[Annotated]) -> Corpus {
        Corpus::new(items.iter().map(|a| a.dialogue.clone()).collect()).expect("generated ids are unique").with_meta("source", DATASET)
    }
}
