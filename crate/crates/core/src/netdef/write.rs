use std::fmt::Write;

use super::NetDef;
use crate::layers::*;
use crate::tensor::Filler;

struct Out {
    s: String,
    depth: usize,
}

impl Out {
    fn line(&mut self, text: impl std::fmt::Display) {
        for _ in 0..self.depth {
            self.s.push_str("  ");
        }
        writeln!(self.s, "{text}").unwrap();
    }

    fn open(&mut self, key: &str) {
        self.line(format_args!("{key} {{"));
        self.depth += 1;
    }

    fn close(&mut self) {
        self.depth -= 1;
        self.line("}");
    }

    fn kv(&mut self, key: &str, value: impl std::fmt::Display) {
        self.line(format_args!("{key}: {value}"));
    }

    fn str(&mut self, key: &str, value: &str) {
        self.kv(key, quote(value));
    }
}

pub(crate) fn quote(s: &str) -> String {
    let mut q = String::with_capacity(s.len() + 2);
    q.push('"');
    for c in s.chars() {
        match c {
            '"' => q.push_str("\\\""),
            '\\' => q.push_str("\\\\"),
            '\n' => q.push_str("\\n"),
            '\t' => q.push_str("\\t"),
            c => q.push(c),
        }
    }
    q.push('"');
    q
}

pub(crate) fn netdef(def: &NetDef) -> String {
    let mut o = Out {
        s: String::new(),
        depth: 0,
    };
    o.str("name", &def.name);
    for input in &def.inputs {
        o.open("input");
        o.str("name", &input.name);
        let s = input.shape;
        o.kv("shape", format_args!("{} {} {} {}", s.num, s.channels, s.height, s.width));
        o.kv("scale", input.scale);
        o.close();
    }
    for l in &def.layers {
        o.open("layer");
        o.str("name", &l.name);
        o.kv("kind", l.kind);
        for b in &l.bottoms {
            o.str("bottom", b);
        }
        for t in &l.tops {
            o.str("top", t);
        }
        params(&mut o, &l.params);
        o.close();
    }
    o.s
}

fn pairs(o: &mut Out, kernel: (usize, usize), stride: (usize, usize), pad: (usize, usize)) {
    o.kv("kernel_h", kernel.0);
    o.kv("kernel_w", kernel.1);
    o.kv("stride_h", stride.0);
    o.kv("stride_w", stride.1);
    o.kv("pad_h", pad.0);
    o.kv("pad_w", pad.1);
}

fn filler(o: &mut Out, key: &str, f: &Filler) {
    o.open(key);
    match *f {
        Filler::Constant { value } => {
            o.kv("kind", "constant");
            o.kv("value", value);
        }
        Filler::Uniform { min, max } => {
            o.kv("kind", "uniform");
            o.kv("min", min);
            o.kv("max", max);
        }
        Filler::Gaussian { mean, std } => {
            o.kv("kind", "gaussian");
            o.kv("mean", mean);
            o.kv("std", std);
        }
        Filler::Xavier => o.kv("kind", "xavier"),
    }
    o.close();
}

fn params(o: &mut Out, p: &LayerParams) {
    match p {
        LayerParams::None => {}
        LayerParams::Data(d) => {
            o.open("data");
            o.str("source", &d.source);
            o.str("label_source", &d.label_source);
            if let Some(s) = &d.test_source {
                o.str("test_source", s);
            }
            if let Some(s) = &d.test_label_source {
                o.str("test_label_source", s);
            }
            o.kv("batch_size", d.batch_size);
            o.kv("test_batch_size", d.test_batch_size);
            o.kv("channels", d.channels);
            o.kv("height", d.height);
            o.kv("width", d.width);
            o.kv("scale", d.scale);
            if let Some(s) = &d.mean_file {
                o.str("mean_file", s);
            }
            o.kv("shuffle", d.shuffle);
            o.close();
        }
        LayerParams::Conv(c) => {
            o.open("conv");
            o.kv("num_output", c.num_output);
            pairs(o, (c.kernel_h, c.kernel_w), (c.stride_h, c.stride_w), (c.pad_h, c.pad_w));
            o.kv("bias_term", c.bias_term);
            filler(o, "weight_filler", &c.weight_filler);
            filler(o, "bias_filler", &c.bias_filler);
            o.close();
        }
        LayerParams::Pool(p) => {
            o.open("pool");
            o.kv("method", p.method.keyword());
            pairs(o, (p.kernel_h, p.kernel_w), (p.stride_h, p.stride_w), (p.pad_h, p.pad_w));
            o.close();
        }
        LayerParams::InnerProduct(p) => {
            o.open("inner_product");
            o.kv("num_output", p.num_output);
            o.kv("bias_term", p.bias_term);
            filler(o, "weight_filler", &p.weight_filler);
            filler(o, "bias_filler", &p.bias_filler);
            o.close();
        }
        LayerParams::Lrn(p) => {
            o.open("lrn");
            o.kv("local_size", p.local_size);
            o.kv("alpha", p.alpha);
            o.kv("beta", p.beta);
            o.kv("k", p.k);
            o.close();
        }
        LayerParams::Eltwise(p) => {
            o.open("eltwise");
            o.kv("op", p.op.keyword());
            if !p.coeffs.is_empty() {
                let list: Vec<String> = p.coeffs.iter().map(|c| c.to_string()).collect();
                o.kv("coeff", list.join(" "));
            }
            o.close();
        }
    }
}
