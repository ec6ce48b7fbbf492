#![allow(dead_code)]

use skillq::model::{ModelKind, SystemBuilder, SystemSpec};

pub struct Fixture {
    pub name: &'static str,
    pub classes: Vec<(&'static str, f64, Vec<&'static str>)>,
    pub servers: Vec<(&'static str, f64)>,
    pub nested: bool,
}

impl Fixture {
    pub fn build(&self, kind: ModelKind) -> SystemSpec {
        let mut b = SystemBuilder::new(kind);
        for (id, lam, _) in &self.classes {
            b = b.class(id, *lam);
        }
        for (id, mu) in &self.servers {
            b = b.server(id, *mu);
        }
        for (id, _, s) in &self.classes {
            b = b.edges(id, s);
        }
        b.build().unwrap()
    }

    /// The same system with class abandonment `gamma` and server abandonment `nu`.
    pub fn with_abandonment(&self, gamma: f64, nu: f64) -> SystemSpec {
        let mut b = SystemBuilder::new(ModelKind::Dbma);
        for (id, lam, _) in &self.classes {
            b = b.class_with_abandonment(id, *lam, gamma);
        }
        for (id, mu) in &self.servers {
            b = b.server_with_abandonment(id, *mu, nu);
        }
        for (id, _, s) in &self.classes {
            b = b.edges(id, s);
        }
        b.build().unwrap()
    }
}

pub fn mm1() -> Fixture {
    Fixture { name: "mm1", classes: vec![("1", 0.5, vec!["1"])], servers: vec![("1", 1.0)], nested: true }
}

pub fn w_model() -> Fixture {
    Fixture {
        name: "w",
        classes: vec![("1", 0.3, vec!["1"]), ("2", 0.3, vec!["2"]), ("3", 0.5, vec!["1", "2"])],
        servers: vec![("1", 1.0), ("2", 1.0)],
        nested: true,
    }
}

pub fn n_model() -> Fixture {
    Fixture {
        name: "n",
        classes: vec![("1", 1.0, vec!["1"]), ("2", 1.0, vec!["1", "2"])],
        servers: vec![("1", 1.5), ("2", 1.5)],
        nested: true,
    }
}

pub fn chain4() -> Fixture {
    Fixture {
        name: "chain4",
        classes: vec![
            ("1", 0.4, vec!["1", "2"]),
            ("2", 0.4, vec!["2", "3"]),
            ("3", 0.4, vec!["3", "4"]),
            ("4", 0.4, vec!["1", "2", "3", "4"]),
        ],
        servers: vec![("1", 1.0), ("2", 1.0), ("3", 1.0), ("4", 1.0)],
        nested: false,
    }
}

pub fn cycle3() -> Fixture {
    Fixture {
        name: "cycle3",
        classes: vec![("1", 0.5, vec!["1", "2"]), ("2", 0.5, vec!["2", "3"]), ("3", 0.5, vec!["1", "3"])],
        servers: vec![("1", 1.0), ("2", 1.0), ("3", 1.0)],
        nested: false,
    }
}

pub fn tree5() -> Fixture {
    Fixture {
        name: "tree5",
        classes: vec![
            ("1", 0.2, vec!["1"]),
            ("2", 0.3, vec!["1", "2"]),
            ("3", 0.25, vec!["3"]),
            ("4", 0.2, vec!["4"]),
            ("5", 0.4, vec!["3", "4", "5"]),
            ("6", 0.5, vec!["1", "2", "3", "4", "5"]),
        ],
        servers: vec![("1", 1.0), ("2", 1.0), ("3", 1.0), ("4", 1.0), ("5", 1.0)],
        nested: true,
    }
}

/// The five fixtures shared by most criteria.
pub fn core_fixtures() -> Vec<Fixture> {
    vec![mm1(), w_model(), n_model(), chain4(), cycle3()]
}

pub fn nested_fixtures() -> Vec<Fixture> {
    vec![mm1(), w_model(), n_model(), tree5()]
}

pub fn gm_triangle() -> SystemSpec {
    SystemBuilder::new(ModelKind::Gm)
        .class("a", 0.3)
        .class("b", 0.3)
        .class("c", 0.4)
        .link("a", "b")
        .link("b", "c")
        .link("a", "c")
        .build()
        .unwrap()
}

pub fn gm_kite() -> SystemSpec {
    SystemBuilder::new(ModelKind::Gm)
        .class("a", 0.2)
        .class("b", 0.3)
        .class("c", 0.3)
        .class("d", 0.2)
        .link("a", "b")
        .link("a", "c")
        .link("b", "c")
        .link("b", "d")
        .link("c", "d")
        .build()
        .unwrap()
}
