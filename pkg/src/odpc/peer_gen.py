"""Peer-class label generation.

For every in-distribution class we ask a language model which categories look
or read similar, then keep the first ``peers_per_class`` candidates that are
not themselves ID labels and are new to that class's list. Responses are
cached on disk keyed by (provider identity, prompt) so runs are reproducible
and work offline once warm.

Label equality is Unicode case-fold plus whitespace trim; LLM output varies
in case, and nothing else in the pipeline should care.
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Protocol, runtime_checkable

from . import persist
from .errors import ConfigError, GenerationError, InvalidArgumentError, OfflineError

DEFAULT_PROMPT_TEMPLATE = "what categories are similar to [class] in semantic or appearance"
DEFAULT_DESCRIPTION_TEMPLATE = "This is a photo of a [CLASS]"

REQUERY_SUFFIX = " (give different answers)"

PROVIDER_KINDS = ("http_llm", "stub")


def normalize_label(label: str) -> str:
    """Canonical form used for every label comparison."""
    return label.strip().casefold()


@dataclass(frozen=True)
class PeerGenConfig:
    peers_per_class: int = 3
    prompt_template: str = DEFAULT_PROMPT_TEMPLATE
    description_template: str = DEFAULT_DESCRIPTION_TEMPLATE
    provider_kind: str = "stub"
    max_requery_attempts: int = 5
    offline: bool = False

    def __post_init__(self):
        if self.peers_per_class < 0:
            raise ConfigError(f"peers_per_class must be >= 0, got {self.peers_per_class}")
        if self.prompt_template.count("[class]") != 1:
            raise ConfigError("prompt_template must contain the placeholder [class] exactly once")
        if self.description_template.count("[CLASS]") != 1:
            raise ConfigError("description_template must contain the placeholder [CLASS] exactly once")
        if self.provider_kind not in PROVIDER_KINDS:
            raise ConfigError(f"provider_kind must be one of {PROVIDER_KINDS}")
        if self.max_requery_attempts < 1:
            raise ConfigError("max_requery_attempts must be >= 1")


@dataclass
class PeerClassSet:
    """Ordered peer labels per ID class, plus where they came from."""

    id_labels: list[str]
    peers: dict[str, list[str]]
    provenance: dict[str, str]

    def all_peer_labels(self) -> list[str]:
        out: list[str] = []
        for label in self.id_labels:
            out.extend(self.peers[label])
        return out

    def distinct_peer_count(self) -> int:
        """Distinct peers across all classes after normalization; sizes the classifier."""
        return len({normalize_label(p) for p in self.all_peer_labels()})


def build_prompt(class_label: str, cfg: PeerGenConfig) -> str:
    """Render the peer-generation prompt for one class label."""
    if not class_label.strip():
        raise InvalidArgumentError("class label is empty")
    return cfg.prompt_template.replace("[class]", class_label)


def render_description(label: str, cfg: PeerGenConfig) -> str:
    """Render the textual description for one (ID or peer) label."""
    if not label.strip():
        raise InvalidArgumentError("label is empty")
    return cfg.description_template.replace("[CLASS]", label)


@runtime_checkable
class LlmProvider(Protocol):
    identifier: str
    requires_network: bool

    def request(self, prompt: str) -> list[str]: ...


_ADJECTIVES = (
    "amber", "arctic", "ashen", "bronze", "coastal", "crested", "dappled",
    "dwarf", "giant", "golden", "harlequin", "highland", "ivory", "lesser",
    "marbled", "masked", "mottled", "northern", "painted", "pygmy", "ringed",
    "russet", "saddled", "shadow", "silver", "speckled", "spotted", "striped",
    "tufted", "umber", "velvet", "western",
)
_NOUNS = (
    "badger", "bittern", "bobcat", "caracal", "civet", "courser", "dhole",
    "drongo", "genet", "grebe", "hog", "ibex", "jackal", "kite", "lynx",
    "marten", "mongoose", "ocelot", "oriole", "pangolin", "pipit", "polecat",
    "quoll", "serval", "shrike", "stoat", "tapir", "tern", "vole", "wagtail",
    "weasel", "zorilla",
)


class StubProvider:
    """Offline provider: deterministic pseudo-labels derived from the prompt.

    Candidates are adjective-noun pairs drawn without replacement from fixed
    vocabularies, seeded by (prompt, seed), so identical queries always see
    identical candidate lists.
    """

    requires_network = False

    def __init__(self, seed: int = 0, candidates_per_query: int = 12):
        if candidates_per_query < 1:
            raise ConfigError("candidates_per_query must be >= 1")
        self.seed = seed
        self.candidates_per_query = candidates_per_query
        self.identifier = f"stub:seed={seed}"

    def request(self, prompt: str) -> list[str]:
        import numpy as np

        digest = hashlib.sha256(prompt.encode("utf-8")).digest()
        key = tuple(int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4))
        rng = np.random.default_rng(np.random.SeedSequence(entropy=self.seed, spawn_key=key))
        n_combos = len(_ADJECTIVES) * len(_NOUNS)
        count = min(self.candidates_per_query, n_combos)
        picks = rng.choice(n_combos, size=count, replace=False)
        return [f"{_ADJECTIVES[p // len(_NOUNS)]} {_NOUNS[p % len(_NOUNS)]}" for p in picks]


_HTTP_SYSTEM_INSTRUCTION = (
    "You list category labels. Reply with short category labels only, "
    "one per line, no numbering and no commentary."
)


class HttpLlmProvider:
    """Chat-completions-style HTTP provider.

    The API key comes from the ODPC_LLM_API_KEY environment variable; the
    transport is injectable for tests. Responses are expected as newline-
    or comma-separated label lists.
    """

    requires_network = True
    api_key_env = "ODPC_LLM_API_KEY"

    def __init__(self, endpoint: str, model: str, timeout: float = 30.0, post_fn=None):
        self.endpoint = endpoint
        self.model = model
        self.timeout = timeout
        self._post = post_fn
        self.identifier = f"http:{model}@{endpoint}"

    def _api_key(self) -> str:
        import os

        key = os.environ.get(self.api_key_env, "")
        if not key:
            raise ConfigError(f"environment variable {self.api_key_env} is not set")
        return key

    def request(self, prompt: str) -> list[str]:
        payload = {
            "model": self.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": _HTTP_SYSTEM_INSTRUCTION},
                {"role": "user", "content": prompt},
            ],
        }
        headers = {"Authorization": f"Bearer {self._api_key()}"}
        post = self._post
        if post is None:
            import requests

            def post(url, json_body, headers, timeout):
                resp = requests.post(url, json=json_body, headers=headers, timeout=timeout)
                resp.raise_for_status()
                return resp.json()

        try:
            body = post(self.endpoint, payload, headers, self.timeout)
            content = body["choices"][0]["message"]["content"]
        except ConfigError:
            raise
        except Exception as exc:
            raise GenerationError(f"LLM request failed: {exc}") from exc
        return parse_label_list(content)


def parse_label_list(content: str) -> list[str]:
    """Turn a model reply into an ordered list of short labels."""
    lines = [ln.strip() for ln in content.splitlines() if ln.strip()]
    if len(lines) == 1 and "," in lines[0]:
        lines = [part.strip() for part in lines[0].split(",")]
    labels = []
    for line in lines:
        label = line.lstrip("-*0123456789.) \t").strip()
        if label:
            labels.append(label)
    return labels


def make_provider(cfg: PeerGenConfig, seed: int = 0, endpoint: str = "", model: str = "") -> LlmProvider:
    if cfg.provider_kind == "stub":
        return StubProvider(seed=seed)
    if not endpoint or not model:
        raise ConfigError("http_llm provider needs an endpoint and a model name")
    return HttpLlmProvider(endpoint=endpoint, model=model)


class LlmCache:
    """(provider, prompt) -> response cache, JSON on disk, write-serialized."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        self._entries: dict[str, dict] = {}
        if self.path is not None and self.path.exists():
            data = persist.read_json(self.path)
            if not isinstance(data, dict) or "entries" not in data:
                raise ConfigError(f"{self.path}: not a valid LLM cache file")
            self._entries = dict(data["entries"])

    @staticmethod
    def _key(provider_id: str, prompt: str) -> str:
        raw = provider_id + "\x00" + prompt
        return hashlib.sha256(raw.encode("utf-8")).hexdigest()

    def get(self, provider_id: str, prompt: str) -> dict | None:
        return self._entries.get(self._key(provider_id, prompt))

    def put(self, provider_id: str, prompt: str, response: list[str]) -> dict:
        entry = {
            "provider": provider_id,
            "prompt": prompt,
            "response": list(response),
            "fetched_at": datetime.now(timezone.utc).isoformat(),
        }
        with self._lock:
            self._entries[self._key(provider_id, prompt)] = entry
            if self.path is not None:
                persist.write_json(self.path, {"version": 1, "entries": self._entries})
        return entry


def _fetch_candidates(
    prompt: str, provider: LlmProvider, cache: LlmCache, offline: bool
) -> tuple[list[str], str]:
    """Candidates plus the fetch timestamp, from cache when possible."""
    hit = cache.get(provider.identifier, prompt)
    if hit is not None:
        return list(hit["response"]), hit["fetched_at"]
    if offline and provider.requires_network:
        raise OfflineError(
            f"offline mode: no cached response for provider {provider.identifier!r}"
        )
    response = provider.request(prompt)
    entry = cache.put(provider.identifier, prompt, response)
    return list(response), entry["fetched_at"]


def generate_peer_classes(
    id_labels: list[str],
    cfg: PeerGenConfig,
    provider: LlmProvider,
    cache: LlmCache | None = None,
) -> PeerClassSet:
    """Generate peers_per_class peer labels for every ID class.

    Candidates colliding (after normalization) with any ID label or with an
    earlier-accepted peer of the same class are discarded; the provider is
    re-queried with a variation suffix up to max_requery_attempts times if
    too few survive.
    """
    if not id_labels:
        raise InvalidArgumentError("id_labels is empty")
    normalized = [normalize_label(lb) for lb in id_labels]
    if any(not nb for nb in normalized):
        raise InvalidArgumentError("an ID label is empty after trimming")
    if len(set(normalized)) != len(normalized):
        raise InvalidArgumentError("ID labels collide after normalization")
    id_set = set(normalized)
    if cache is None:
        cache = LlmCache()

    peers: dict[str, list[str]] = {}
    timestamps: list[str] = []
    for label in id_labels:
        if cfg.peers_per_class == 0:
            peers[label] = []
            continue
        base_prompt = build_prompt(label, cfg)
        accepted: list[str] = []
        accepted_norm: set[str] = set()
        for attempt in range(cfg.max_requery_attempts):
            prompt = base_prompt if attempt == 0 else base_prompt + REQUERY_SUFFIX * attempt
            try:
                candidates, fetched_at = _fetch_candidates(prompt, provider, cache, cfg.offline)
            except (OfflineError, GenerationError) as exc:
                exc.args = (f"class {label!r}: {exc}",)
                raise
            timestamps.append(fetched_at)
            for cand in candidates:
                norm = normalize_label(cand)
                if not norm or norm in id_set or norm in accepted_norm:
                    continue
                accepted.append(cand.strip())
                accepted_norm.add(norm)
                if len(accepted) == cfg.peers_per_class:
                    break
            if len(accepted) == cfg.peers_per_class:
                break
        if len(accepted) < cfg.peers_per_class:
            raise GenerationError(
                f"class {label!r}: only {len(accepted)} of {cfg.peers_per_class} "
                f"valid peer labels after {cfg.max_requery_attempts} attempts"
            )
        peers[label] = accepted

    provenance = {
        "provider": provider.identifier,
        "generated_at": max(timestamps) if timestamps else "",
    }
    return PeerClassSet(id_labels=list(id_labels), peers=peers, provenance=provenance)


def peer_set_to_dict(peer_set: PeerClassSet, cfg: PeerGenConfig) -> dict:
    return {
        "prompt_template": cfg.prompt_template,
        "description_template": cfg.description_template,
        "n": cfg.peers_per_class,
        "classes": {label: list(peer_set.peers[label]) for label in peer_set.id_labels},
        "provenance": dict(peer_set.provenance),
    }


def save_peers(peer_set: PeerClassSet, cfg: PeerGenConfig, path: str | Path) -> None:
    persist.write_json(path, peer_set_to_dict(peer_set, cfg))


def load_peers(path: str | Path) -> tuple[PeerClassSet, dict]:
    """Read peers.json; returns the peer set and the raw document."""
    doc = persist.read_json(path)
    if not isinstance(doc, dict) or "classes" not in doc:
        raise ConfigError(f"{path}: not a valid peers file")
    classes = doc["classes"]
    peer_set = PeerClassSet(
        id_labels=list(classes.keys()),
        peers={k: list(v) for k, v in classes.items()},
        provenance=dict(doc.get("provenance", {})),
    )
    return peer_set, doc
