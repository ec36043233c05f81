use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

/// Restart policy named on the command line: `every`, `fixed:k`, `arm:path` or `oracle`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PolicySpec {
    Every,
    Fixed(usize),
    Arm(PathBuf),
    Oracle,
}

impl FromStr for PolicySpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.split_once(':') {
            None if s == "every" => Ok(PolicySpec::Every),
            None if s == "oracle" => Ok(PolicySpec::Oracle),
            Some(("fixed", k)) => match k.parse::<usize>() {
                Ok(k) if k >= 1 => Ok(PolicySpec::Fixed(k)),
                _ => Err(format!("fixed interval must be a positive integer, got {k:?}")),
            },
            Some(("arm", p)) if !p.is_empty() => Ok(PolicySpec::Arm(PathBuf::from(p))),
            _ => Err(format!("unknown policy {s:?}; expected every, fixed:K, arm:PATH or oracle")),
        }
    }
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicySpec::Every => write!(f, "every"),
            PolicySpec::Fixed(k) => write!(f, "fixed:{k}"),
            PolicySpec::Arm(p) => write!(f, "arm:{}", p.display()),
            PolicySpec::Oracle => write!(f, "oracle"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_the_grammar() {
        assert_eq!("every".parse(), Ok(PolicySpec::Every));
        assert_eq!("oracle".parse(), Ok(PolicySpec::Oracle));
        assert_eq!("fixed:3".parse(), Ok(PolicySpec::Fixed(3)));
        assert_eq!("arm:runs/a.json".parse(), Ok(PolicySpec::Arm("runs/a.json".into())));
        for bad in ["", "fixed", "fixed:0", "fixed:-1", "fixed:x", "arm:", "every:1", "sometimes"] {
            assert!(bad.parse::<PolicySpec>().is_err(), "{bad}");
        }
    }

    #[test]
    fn display_round_trips() {
        for s in ["every", "oracle", "fixed:8", "arm:x/y.json"] {
            assert_eq!(s.parse::<PolicySpec>().unwrap().to_string(), s);
        }
    }
}
