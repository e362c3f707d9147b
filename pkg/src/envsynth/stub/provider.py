"""Seeded, offline stand-in for every provider port.

Outputs are a pure function of ``(seed, request)``, so runs are reproducible
byte for byte. ``faults`` injects a bounded number of deliberate mistakes so
the validation, audit and repair paths can be exercised:

``bad_label``            emit non-snake_case domain labels
``omit_core_fk``         blueprint drafts without the core foreign key
``fabricate_attribute``  policy rule on an attribute the database lacks
``wallclock``            policy uses ``today`` instead of ``now``
``typo_param``           policy misspells a parameter name (repairable)
``unfixable_param``      policy references a parameter nothing resembles
``hallucinate_placeholder``  template placeholder on an unknown attribute
``leaky_query``          startup query that reveals every slot
``unvalidated_pair``     cross pairing whose second segment was never validated
"""

from __future__ import annotations

import difflib
import json
import re
from typing import Any

from ..util import camel_words, rng_for, to_snake
from . import kb

TS_PATTERN = r"[0-9]{4}-[0-9]{2}-[0-9]{2}T[0-9]{2}:[0-9]{2}:[0-9]{2}"
ID_PATTERN = r"[a-z0-9_]+"
REL_STATUSES = ("pending", "confirmed", "completed", "cancelled")
TIME_RANGE = "2025-01-01T00:00:00..2025-12-31T23:59:59"
REGISTERED_RANGE = "2015-01-01T00:00:00..2024-12-31T23:59:59"


def human(name: str) -> str:
    return " ".join(camel_words(name))


def plural(word: str) -> str:
    if word.endswith(("s", "x", "ch", "sh")):
        return word + "es"
    if word.endswith("y") and word[-2:-1] not in "aeiou":
        return word[:-1] + "ies"
    return word + "s"


class StubProvider:
    """Deterministic provider, relation oracle, judge and fixer."""

    def __init__(self, seed: int = 0, faults: dict[str, int] | None = None, judge_tags: list[str] | None = None) -> None:
        self.seed = seed
        self.faults = dict(faults or {})
        self.judge_tags = list(judge_tags or [])
        self.calls: dict[str, int] = {}

    def _fault(self, name: str) -> bool:
        left = self.faults.get(name, 0)
        if left > 0:
            self.faults[name] = left - 1
            return True
        return False

    # ------------------------------------------------------------------ synthesis

    def generate(self, kind: str, request: dict[str, Any]) -> Any:
        self.calls[kind] = self.calls.get(kind, 0) + 1
        handler = getattr(self, "_gen_" + kind, None)
        if handler is None:
            raise ValueError(f"stub provider has no generator for {kind!r}")
        return handler(request)

    def _domain_candidates(self, seeds: list[str]) -> list[dict[str, str]]:
        out = []
        for s in seeds:
            terms = s.split("_")[:2]
            for strategy in kb.STRATEGIES:
                for mod in kb.DOMAIN_MODIFIERS[strategy]:
                    if mod in terms:
                        continue
                    out.append({"label": "_".join(terms + [mod]), "parent_seed": s, "strategy": strategy})
        return out

    def _gen_domains(self, req: dict[str, Any]) -> list[dict[str, str]]:
        existing = set(req.get("existing", ()))
        cands = [c for c in self._domain_candidates(req["seeds"]) if c["label"] not in existing]
        rng_for(self.seed, "domains", req.get("batch_index", 0)).shuffle(cands)
        out: list[dict[str, Any]] = []
        for c in cands[: req["count"]]:
            if self._fault("bad_label"):
                out.append({**c, "label": "Bad-" + c["label"].title()})
            else:
                out.append(c)
        return out

    def _gen_domain_retry(self, req: dict[str, Any]) -> dict[str, str]:
        if self.faults.get("bad_label_always"):
            return {"label": "Still Bad", "parent_seed": "", "strategy": "horizontal"}
        existing = set(req.get("existing", ()))
        cands = [c for c in self._domain_candidates(req["seeds"]) if c["label"] not in existing]
        rng_for(self.seed, "domains", req.get("batch_index", 0)).shuffle(cands)
        idx = req.get("position", 0)
        return cands[idx % len(cands)] if cands else {"label": "x", "parent_seed": "", "strategy": "horizontal"}

    def _gen_entities(self, req: dict[str, Any]) -> list[dict[str, Any]]:
        fams = kb.families_of(list(req["domains"]))
        out = []
        for fam in fams:
            for e in kb.ENTITIES:
                if e.family == fam:
                    out.append(self.entity_dict(e))
            if fam == fams[0]:
                # providers routinely propose the runtime's own session object
                out.append({"name": "Session", "is_person": False, "primary_key": "session_id", "attributes": {}})
        return out

    @staticmethod
    def entity_dict(e: kb.EntityEntry) -> dict[str, Any]:
        attrs: dict[str, Any] = {}
        if e.person:
            attrs["full_name"] = {"value_type": "string", "dimension": "physical"}
        else:
            attrs["title"] = {"value_type": "string", "dimension": "physical"}
        mname, mtype, mrange = e.measure
        attrs[mname] = {"value_type": mtype, "dimension": "physical", "range": mrange}
        attrs["registered_at"] = {"value_type": "timestamp", "dimension": "lifecycle", "range": REGISTERED_RANGE}
        attrs["is_active"] = {"value_type": "boolean", "dimension": "lifecycle"}
        attrs[e.match_attr] = {"value_type": "enum", "dimension": "state", "categories": list(e.categories)}
        attrs["city"] = {"value_type": "string", "dimension": "geospatial"}
        if e.person:
            attrs["email"] = {"value_type": "string", "dimension": "other"}
        return {
            "name": e.name,
            "is_person": e.person,
            "primary_key": e.raw_key or e.name.lower() + "_id",
            "attributes": attrs,
        }

    def _gen_blueprint(self, req: dict[str, Any]) -> dict[str, Any]:
        outline = req["outline"]
        entities = req["entities"]
        omit_fk = self._fault("omit_core_fk") and not req.get("feedback")
        return build_blueprint(outline, entities, omit_core_fk=omit_fk)

    def _gen_policy(self, req: dict[str, Any]) -> str:
        faults = {f for f in ("fabricate_attribute", "wallclock", "typo_param", "unfixable_param") if self._fault(f)}
        return build_policy(req["blueprint"], req["meta"], faults)

    def _gen_tool_graph_hint(self, req: dict[str, Any]) -> None:
        return None

    def _gen_template(self, req: dict[str, Any]) -> dict[str, Any]:
        slots = [tuple(s) for s in req["slots"]]
        intents = [t["intent"] for t in req["tools"]]
        lead = "I would like to " + ", then ".join(intents) + "."
        parts = [lead]
        for ent, attr in slots:
            parts.append(f"The {human(ent)} {attr.replace('_', ' ')} is <{ent}.{attr}>.")
        if self._fault("hallucinate_placeholder"):
            parts.append(f"My loyalty code is <{slots[0][0] if slots else 'Thing'}.loyalty_code>.")
        return {"text": " ".join(parts)}

    def _gen_startup_query(self, req: dict[str, Any]) -> str:
        slots = [tuple(s) for s in req["slots"]]
        values = req["values"]
        problem = req["problem"]
        if self._fault("leaky_query"):
            known = ", ".join(f"{a.replace('_', ' ')} {values[f'{e}.{a}']}" for e, a in slots)
            return f"Hi, I need to {problem}. Details: {known}."
        if len(slots) > 1:
            e, a = slots[0]
            return f"Hi, I need to {problem}. My {a.replace('_', ' ')} is {values[f'{e}.{a}']}."
        return f"Hi, I need to {problem}."

    def _gen_motivation(self, req: dict[str, Any]) -> str:
        return f"After finishing with {human(req['domain_a'])}, the same person continues with {human(req['domain_b'])}."

    def _gen_domain_pairs(self, req: dict[str, Any]) -> None:
        return None  # defer to the shared-person rule

    def _gen_cross_pairs(self, req: dict[str, Any]) -> list[dict[str, Any]]:
        a_list, b_list = list(req["trajectories_a"]), list(req["trajectories_b"])
        rng = rng_for(self.seed, "cross", req["domain_a"], req["domain_b"])
        pairs = []
        for i in range(req.get("count", 5)):
            if not a_list or not b_list:
                break
            ta = a_list[(i + rng.randrange(len(a_list))) % len(a_list)]
            tb = b_list[(i * 7 + rng.randrange(len(b_list))) % len(b_list)]
            pairs.append({"tau_a": ta, "tau_b": tb, "motivation": self._gen_motivation(req)})
        if a_list and self._fault("unvalidated_pair"):
            pairs.append({"tau_a": a_list[0], "tau_b": "0" * 24, "motivation": "speculative"})
        return pairs

    def _gen_bridge_rules(self, req: dict[str, Any]) -> list[str]:
        """Later-domain creation requires an earlier-domain relationship confirmed."""
        out = []
        a, b = req["domain_a"], req["domain_b"]
        core_key = req["core_key"]
        a_rels = req["relationships_a"]
        for tool in req["creating_tools_b"]:
            if not a_rels:
                break
            rel = a_rels[0]
            peripheral, pkey = tool["peripheral"], tool["peripheral_key"]
            out.append(
                f"{b}__{tool['name']}: exists({a}_{rel}, {core_key} = session.authorized_{core_key} and status = \"confirmed\")"
                f" and lookup({peripheral}, param.{pkey}).is_active = true"
            )
        return out

    # ------------------------------------------------------------------ oracle

    def relate(self, person: str, targets: list[str]) -> list[dict[str, str]]:
        self.calls["relate"] = self.calls.get("relate", 0) + 1
        src = kb.BY_NAME.get(person)
        fam = src.family if src else "general"
        out = []
        for t in targets:
            entry = kb.BY_NAME.get(t)
            if entry is not None and entry.family == fam and t != person:
                out.append({"target": t, "domain_context": fam})
        return out

    # ------------------------------------------------------------------ judge

    def score_template(self, template: dict[str, Any]) -> dict[str, int]:
        text = template["text"]
        low = text.lower()
        slots = template.get("slots", [])
        intents = template.get("intents", [])
        covered = sum(1 for e, a in slots if f"<{e}.{a}>" in text)
        mentioned = sum(1 for i in intents if i.lower() in low)
        coherence = 5 if not intents or mentioned == len(intents) else max(1, 5 - (len(intents) - mentioned) * 2)
        completeness = 5 if not slots or covered == len(slots) else max(1, 5 - (len(slots) - covered) * 2)
        clarity = 5 if 30 <= len(text) <= 1500 else 2
        placeholders = re.findall(r"<([A-Za-z]+)\.([a-z0-9_]+)>", text)
        known = {(e, a) for e, a in slots}
        faithfulness = 5 if all(p in known for p in placeholders) else 1
        realism = 5 if low.startswith("i ") or low.startswith("i'") else 3
        return {
            "coherence": coherence,
            "completeness": completeness,
            "clarity": clarity,
            "faithfulness": faithfulness,
            "realism": realism,
        }

    def judge_rollout(self, log: dict[str, Any]) -> list[str]:
        return list(self.judge_tags)

    # ------------------------------------------------------------------ fixer

    def diagnose(self, failure: dict[str, Any]) -> dict[str, Any]:
        """Trace a failing contract self-test back to a patch.

        Unbound parameters are renamed to the closest declared parameter of
        the same tool; failures with no plausible rename yield no patch.
        """
        patches = []
        category = "ImplementationBug"
        for f in failure.get("failures", []):
            reason = f.get("reason", "")
            m = re.search(r"unbound parameter '([A-Za-z_0-9]+)'", reason)
            if m:
                bad = m.group(1)
                declared = failure.get("tool_params", {}).get(f.get("tool"), [])
                guess = difflib.get_close_matches(bad, declared, n=1, cutoff=0.85)
                if guess:
                    patches.append({"search": f"param.{bad}", "replace": f"param.{guess[0]}", "mode": "text"})
                continue
            if "no rows" in reason or "fixture" in reason:
                category = "DataIssue"
            elif "expected" in reason and "test" in reason:
                category = "TestDefect"
        uniq = {json.dumps(p, sort_keys=True): p for p in patches}
        return {"category": category, "patches": list(uniq.values())}


# ---------------------------------------------------------------------- builders


def _names(core: str, p: str) -> dict[str, str]:
    entry = kb.BY_NAME.get(p)
    noun = entry.noun if entry else "Link"
    rel = p + noun
    return {
        "p_snake": to_snake(p),
        "p_key": p.lower() + "_id",
        "rel": rel,
        "r_snake": to_snake(rel),
        "r_key": rel.lower() + "_id",
        "r_human": human(rel),
        "p_human": human(p),
        "c_key": core.lower() + "_id",
    }


def _match_attr(schema: dict[str, Any]) -> tuple[str, list[str]] | None:
    attrs = schema.get("attributes", {})
    for name, spec in attrs.items():
        if spec.get("value_type") == "enum" and spec.get("dimension") == "state":
            return name, list(spec["categories"])
    for name, spec in attrs.items():
        if spec.get("value_type") == "enum":
            return name, list(spec["categories"])
    return None


def build_blueprint(outline: dict[str, Any], entities: dict[str, Any], omit_core_fk: bool = False) -> dict[str, Any]:
    core = outline["core"]
    peripherals = list(outline["peripherals"])
    c_key = core.lower() + "_id"
    c_snake = to_snake(core)
    rels = []
    functions = []
    meta: dict[str, Any] = {}

    def tool(name, desc, params, role="read", mutating=False, confirm=False, returns="row"):
        functions.append({
            "name": name,
            "description": desc,
            "legal_accessor": [core],
            "parameters": {p: {"description": d, "type": t, "range": r} for p, (d, t, r, _, _) in params.items()},
        })
        meta[name] = {
            "mutating": mutating,
            "requires_confirmation": confirm,
            "role": role,
            "returns": returns,
            "sources": {p: v[3] for p, v in params.items() if v[3]},
            "nondeterministic": sorted(p for p, v in params.items() if v[4]),
        }

    tool(
        f"authorize_{c_snake}",
        f"verify my identity as a {human(core)}",
        {c_key: (f"the {human(core)} id", "str", "", f"{core}.{c_key}", False)},
        role="authorize",
        returns="status",
    )
    tool(f"get_{c_snake}_profile", f"review my {human(core)} profile", {})

    for i, p in enumerate(peripherals):
        n = _names(core, p)
        match = _match_attr(entities.get(p, {}))
        attrs: dict[str, Any] = {n["r_key"]: {"type": "identifier", "value_from_entity": "", "range": ""}}
        if not (omit_core_fk and i == 0):
            attrs[c_key] = {"type": "identifier", "value_from_entity": core, "range": ""}
        attrs[n["p_key"]] = {"type": "identifier", "value_from_entity": p, "range": ""}
        attrs["status"] = {"type": "enum", "value_from_entity": "", "range": "|".join(REL_STATUSES)}
        attrs["start_time"] = {"type": "timestamp", "value_from_entity": "", "range": TIME_RANGE}
        attrs["end_time"] = {"type": "timestamp", "value_from_entity": "", "range": TIME_RANGE}
        if match:
            attrs[match[0]] = {"type": "enum", "value_from_entity": p, "range": "|".join(match[1])}
        attrs["notes"] = {"type": "string", "value_from_entity": "", "range": ""}
        rels.append({"name": n["rel"], "description": f"a {n['r_human']} between a {human(core)} and a {n['p_human']}", "attributes": attrs})

        rk, pk = n["r_key"], n["p_key"]
        r_src = f"{n['rel']}.{rk}"
        listing = {}
        if match:
            listing[match[0]] = (f"{n['p_human']} {match[0].replace('_', ' ')}", "str", "|".join(match[1]), f"{p}.{match[0]}", False)
        by = f" by {match[0].replace('_', ' ')}" if match else ""
        tool(f"list_{plural(n['p_snake'])}", f"browse {plural(n['p_human'])}{by}", listing, returns="rows")
        tool(f"get_{n['p_snake']}_details", f"check the details of a {n['p_human']}",
             {pk: (f"the {n['p_human']} id", "str", "", f"{p}.{pk}", False)})
        tool(f"list_my_{plural(n['r_snake'])}", f"see my {plural(n['r_human'])}", {}, returns="rows")
        tool(f"get_{n['r_snake']}", f"look up a {n['r_human']}", {rk: (f"the {n['r_human']} id", "str", "", r_src, False)})
        times = {
            "start_time": ("start time (ISO 8601)", "str", TIME_RANGE, f"{n['rel']}.start_time", False),
            "end_time": ("end time (ISO 8601)", "str", TIME_RANGE, f"{n['rel']}.end_time", False),
        }
        tool(
            f"create_{n['r_snake']}",
            f"book a new {n['r_human']}",
            {
                pk: (f"the {n['p_human']} id", "str", "", f"{p}.{pk}", False),
                **times,
                "notes": ("free-text notes", "str", "", f"{n['rel']}.notes", True),
            },
            role="write", mutating=True, confirm=True, returns="effect",
        )
        tool(f"confirm_{n['r_snake']}", f"confirm the {n['r_human']}", {rk: (f"the {n['r_human']} id", "str", "", r_src, False)},
             role="write", mutating=True, confirm=True, returns="effect")
        tool(f"reschedule_{n['r_snake']}", f"reschedule the {n['r_human']}",
             {rk: (f"the {n['r_human']} id", "str", "", r_src, False), **times},
             role="write", mutating=True, confirm=True, returns="effect")
        tool(f"cancel_{n['r_snake']}", f"cancel the {n['r_human']}", {rk: (f"the {n['r_human']} id", "str", "", r_src, False)},
             role="write", mutating=True, confirm=True, returns="effect")

    bp = {
        "MCP_server_name": outline["name"],
        "description": f"{human(core)} services covering {', '.join(human(p) for p in peripherals)}",
        "core_entity": core,
        "peripheral_entities": peripherals,
        "relationships": rels,
        "functions": functions,
    }
    return {"blueprint": bp, "meta": {"tools": meta}}


def build_policy(bp: dict[str, Any], meta: dict[str, Any], faults: set[str] = frozenset()) -> str:
    core = bp["core_entity"]
    c_key = core.lower() + "_id"
    c_snake = to_snake(core)
    auth_ref = f"session.authorized_{core.lower()}_id"
    L: list[str] = [f'<policy domain="{bp["MCP_server_name"]}">']
    L.append(f"  <description>{bp['description']}</description>")
    L += ["  <global_rules>", '    now >= "2020-01-01T00:00:00"', "  </global_rules>"]

    def block(name: str, confirm: bool, desc: str, pre: list[str], val: list[str], perms: list[str], effects: list[str], ret: str) -> None:
        conf = ' confirmation="required"' if confirm else ""
        L.append(f'  <tool name="{name}"{conf}>')
        L.append(f"    <description>{desc}</description>")
        for tag, body in (("preconditions", pre), ("input_validation", val), ("permissions", perms), ("effects", effects), ("returns", [ret])):
            if body:
                L.append(f"    <{tag}>")
                L.extend(f"      {b}" for b in body)
                L.append(f"    </{tag}>")
        L.append("  </tool>")

    authed = ["session.authenticated = true"]
    block(f"authorize_{c_snake}", False, f"verify my identity as a {human(core)}", [],
          [f'{c_key}: pattern "{ID_PATTERN}"'], ["otherwise => PERMIT"], [], "status")
    block(f"get_{c_snake}_profile", False, f"review my {human(core)} profile", authed, [],
          ["otherwise => PERMIT"], [], f"row {core} key {auth_ref}")

    first_create = True
    for rel in bp["relationships"]:
        p = next((a["value_from_entity"] for k, a in rel["attributes"].items()
                  if a["type"] == "identifier" and a["value_from_entity"] and a["value_from_entity"] != core), None)
        if p is None:
            continue
        n = _names(core, p)
        rk, pk, R = n["r_key"], n["p_key"], n["rel"]
        match = next((k for k, a in rel["attributes"].items() if a["type"] == "enum" and a["value_from_entity"] == p), None)
        owned = f"not exists({R}, {rk} = param.{rk} and {c_key} = {auth_ref})"
        status = f"lookup({R}, param.{rk}).status"
        ts_val = [f'start_time: pattern "{TS_PATTERN}"', f'end_time: pattern "{TS_PATTERN}"']
        now_ref = "today" if "wallclock" in faults and first_create else "now"

        listing_val, listing_where = [], "is_active = true"
        if match:
            cats = rel["attributes"][match]["range"].split("|")
            listing_val = [f"{match}: enum {json.dumps(cats)}"]
            listing_where = f"{match} = param.{match} and is_active = true"
        block(f"list_{plural(n['p_snake'])}", False, f"browse {plural(n['p_human'])}", [], listing_val,
              ["otherwise => PERMIT"], [], f"rows {p} where {listing_where}")
        block(f"get_{n['p_snake']}_details", False, f"check the details of a {n['p_human']}", authed,
              [f'{pk}: pattern "{ID_PATTERN}"'],
              [f'not exists({p}, {pk} = param.{pk}) => REJECT "unknown {n["p_human"]}"', "otherwise => PERMIT"],
              [], f"row {p} key param.{pk}")
        block(f"list_my_{plural(n['r_snake'])}", False, f"see my {plural(n['r_human'])}", authed, [],
              ["otherwise => PERMIT"], [], f"rows {R} where {c_key} = {auth_ref}")
        block(f"get_{n['r_snake']}", False, f"look up a {n['r_human']}", authed, [f'{rk}: pattern "{ID_PATTERN}"'],
              [f'{owned} => REJECT "no such {n["r_human"]} for this account"', "otherwise => PERMIT"],
              [], f"row {R} key param.{rk}")

        create_perms = [
            f'not exists({p}, {pk} = param.{pk}) => REJECT "unknown {n["p_human"]}"',
            f'lookup({p}, param.{pk}).is_active = false => REJECT "{n["p_human"]} is not available"',
        ]
        if "fabricate_attribute" in faults and first_create:
            create_perms.append(f'lookup({p}, param.{pk}).premium_status = true => REJECT "premium members only"')
        create_perms += [
            'param.start_time >= param.end_time => REJECT "start must be before end"',
            f'param.start_time < {now_ref} => REJECT "cannot book in the past"',
            "otherwise => PERMIT",
        ]
        sets = [f"{rk} = new_id", f"{c_key} = {auth_ref}", f"{pk} = param.{pk}", 'status = "pending"',
                "start_time = param.start_time", "end_time = param.end_time"]
        if match:
            sets.append(f"{match} = lookup({p}, param.{pk}).{match}")
        sets.append("notes = param.notes")
        block(f"create_{n['r_snake']}", True, f"book a new {n['r_human']}", authed,
              [f'{pk}: pattern "{ID_PATTERN}"', *ts_val], create_perms,
              [f"insert {R} set " + ", ".join(sets)], "effect")

        confirm_key = rk
        if first_create and "typo_param" in faults:
            confirm_key = rk[:3] + rk[4:]  # drop one letter
        if first_create and "unfixable_param" in faults:
            confirm_key = "zq_reference"
        confirm_owned = f"not exists({R}, {rk} = param.{confirm_key} and {c_key} = {auth_ref})"
        block(f"confirm_{n['r_snake']}", True, f"confirm the {n['r_human']}", authed, [f'{rk}: pattern "{ID_PATTERN}"'],
              [f'{confirm_owned} => REJECT "no such {n["r_human"]} for this account"',
               f'{status} != "pending" => REJECT "only pending {plural(n["r_human"])} can be confirmed"',
               "otherwise => PERMIT"],
              [f'update {R} key param.{rk} set status = "confirmed"'], "effect")
        block(f"reschedule_{n['r_snake']}", True, f"reschedule the {n['r_human']}", authed,
              [f'{rk}: pattern "{ID_PATTERN}"', *ts_val],
              [f'{owned} => REJECT "no such {n["r_human"]} for this account"',
               f'{status} = "completed" => REJECT "completed {plural(n["r_human"])} cannot be changed"',
               f'{status} = "cancelled" => REJECT "cancelled {plural(n["r_human"])} cannot be changed"',
               'param.start_time >= param.end_time => REJECT "start must be before end"',
               'param.start_time < now => REJECT "cannot move into the past"',
               "otherwise => PERMIT"],
              [f"update {R} key param.{rk} set start_time = param.start_time, end_time = param.end_time"], "effect")
        block(f"cancel_{n['r_snake']}", True, f"cancel the {n['r_human']}", authed, [f'{rk}: pattern "{ID_PATTERN}"'],
              [f'{owned} => REJECT "no such {n["r_human"]} for this account"',
               f'{status} = "completed" => REJECT "completed {plural(n["r_human"])} cannot be cancelled"',
               f'{status} = "cancelled" => REJECT "already cancelled"',
               "otherwise => PERMIT"],
              [f'update {R} key param.{rk} set status = "cancelled"'], "effect")
        first_create = False
    L.append("</policy>")
    return "\n".join(L) + "\n"
