"""Road graph model: links, lane capacity, and the RSU coverage set.

Networks are declared in a small plain-text format (one ``link`` record per
road segment plus a single ``coverage`` record naming the segments inside the
roadside unit's radio range).  A loaded network is immutable, so it can be
shared freely between the traffic simulation and the protocol code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

DEFAULT_JAM_SPACING_M = 7.5  # road length claimed by one stopped vehicle

KMH_TO_MPS = 1.0 / 3.6
MPS_TO_KMH = 3.6


class NetworkError(ValueError):
    """Base class for errors raised while loading or querying a network."""


class MalformedRecordError(NetworkError):
    """A record in the network document could not be parsed."""


class NetworkIntegrityError(NetworkError):
    """The document parsed but its cross-references are inconsistent."""


class InvalidLinkError(NetworkError):
    """A link declares out-of-domain geometry (non-positive length, ...)."""


class UnknownLinkError(NetworkError, KeyError):
    """Lookup of a link id that is not part of the network."""

    def __str__(self) -> str:  # KeyError would repr() the message
        return ValueError.__str__(self)


@dataclass(frozen=True)
class Link:
    """One directed road segment."""

    id: str
    length_m: float
    lanes: int
    speed_limit_kmh: float
    in_links: frozenset[str] = frozenset()
    jam_spacing_m: float = DEFAULT_JAM_SPACING_M

    def __post_init__(self):
        if not self.id:
            raise InvalidLinkError("link id must be non-empty")
        if self.length_m <= 0:
            raise InvalidLinkError(
                f"link {self.id}: length must be > 0, got {self.length_m}")
        if self.lanes < 1:
            raise InvalidLinkError(
                f"link {self.id}: lanes must be >= 1, got {self.lanes}")
        if self.speed_limit_kmh <= 0:
            raise InvalidLinkError(
                f"link {self.id}: speed limit must be > 0, got {self.speed_limit_kmh}")
        if self.jam_spacing_m <= 0:
            raise InvalidLinkError(
                f"link {self.id}: jam spacing must be > 0, got {self.jam_spacing_m}")
        object.__setattr__(self, "in_links", frozenset(self.in_links))
        if self.capacity < 1:
            raise InvalidLinkError(
                f"link {self.id}: capacity floor(lanes*length/jam_spacing) is 0; "
                f"the link is too short to hold a vehicle")

    @property
    def speed_limit_mps(self) -> float:
        return self.speed_limit_kmh * KMH_TO_MPS

    @property
    def length_km(self) -> float:
        return self.length_m / 1000.0

    @property
    def capacity(self) -> int:
        """Vehicles the link can hold bumper to bumper across all lanes."""
        return math.floor(self.lanes * self.length_m / self.jam_spacing_m)

    @property
    def jam_density(self) -> float:
        """Maximum density in veh/km/lane implied by the jam spacing."""
        return 1000.0 / self.jam_spacing_m


@dataclass(frozen=True)
class RoadNetwork:
    """Directed graph of links plus the RSU coverage set.

    Immutable after construction; `out_links` adjacency is derived from the
    declared `in_links` relations.
    """

    links: dict[str, Link]
    coverage: frozenset[str]
    _out: dict[str, tuple[str, ...]] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not self.links:
            raise NetworkIntegrityError(
                "network declares no links; coverage set cannot be satisfied")
        for link in self.links.values():
            for src in link.in_links:
                if src not in self.links:
                    raise NetworkIntegrityError(
                        f"link {link.id}: in-link {src!r} is not declared in the network")
        object.__setattr__(self, "coverage", frozenset(self.coverage))
        for cid in self.coverage:
            if cid not in self.links:
                raise NetworkIntegrityError(
                    f"coverage names unknown link {cid!r}")
        out: dict[str, list[str]] = {lid: [] for lid in self.links}
        for link in self.links.values():
            for src in link.in_links:
                out[src].append(link.id)
        object.__setattr__(
            self, "_out", {lid: tuple(sorted(dst)) for lid, dst in out.items()})

    def link(self, link_id: str) -> Link:
        try:
            return self.links[link_id]
        except KeyError:
            raise UnknownLinkError(f"unknown link {link_id!r}") from None

    def in_links(self, link_id: str) -> frozenset[str]:
        """Declared upstream segments; empty for source links."""
        return self.link(link_id).in_links

    def out_links(self, link_id: str) -> tuple[str, ...]:
        self.link(link_id)
        return self._out[link_id]

    def coverage_contains(self, link_id: str) -> bool:
        self.link(link_id)
        return link_id in self.coverage

    @property
    def max_speed_limit_kmh(self) -> float:
        return max(link.speed_limit_kmh for link in self.links.values())

    @property
    def jam_density(self) -> float:
        return max(link.jam_density for link in self.links.values())


def _parse_scalar(record: str, token: str, key: str, kind):
    if not token.startswith(key + "="):
        raise MalformedRecordError(
            f"malformed record {record!r}: expected {key}=<value>, got {token!r}")
    raw = token[len(key) + 1:]
    try:
        return kind(raw)
    except ValueError:
        raise MalformedRecordError(
            f"malformed record {record!r}: {key}={raw!r} is not a valid number") from None


def parse_network(text: str, jam_spacing_m: float = DEFAULT_JAM_SPACING_M) -> RoadNetwork:
    """Parse a network document.

    Grammar (blank lines and ``#`` comments are ignored)::

        link <id> length=<m> lanes=<n> limit=<km/h> in=<id,id,...>
        coverage <id,id,...>

    ``in=`` may carry an empty list for source links.  Exactly one coverage
    record is required.
    """
    links: dict[str, Link] = {}
    coverage: frozenset[str] | None = None
    for raw_line in text.splitlines():
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if tokens[0] == "link":
            if len(tokens) != 6:
                raise MalformedRecordError(
                    f"malformed record {line!r}: expected "
                    f"'link <id> length=<m> lanes=<n> limit=<km/h> in=<ids>'")
            _, lid, t_len, t_lanes, t_limit, t_in = tokens
            if lid in links:
                raise MalformedRecordError(f"malformed record {line!r}: duplicate link id {lid!r}")
            length = _parse_scalar(line, t_len, "length", float)
            lanes = _parse_scalar(line, t_lanes, "lanes", int)
            limit = _parse_scalar(line, t_limit, "limit", float)
            if not t_in.startswith("in="):
                raise MalformedRecordError(
                    f"malformed record {line!r}: expected in=<id,id,...>, got {t_in!r}")
            in_ids = frozenset(s for s in t_in[3:].split(",") if s)
            links[lid] = Link(
                id=lid, length_m=length, lanes=lanes, speed_limit_kmh=limit,
                in_links=in_ids, jam_spacing_m=jam_spacing_m)
        elif tokens[0] == "coverage":
            if coverage is not None:
                raise MalformedRecordError(f"malformed record {line!r}: duplicate coverage record")
            if len(tokens) != 2:
                raise MalformedRecordError(
                    f"malformed record {line!r}: expected 'coverage <id,id,...>'")
            ids = [s for s in tokens[1].split(",") if s]
            if not ids:
                raise MalformedRecordError(
                    f"malformed record {line!r}: coverage must name at least one link")
            coverage = frozenset(ids)
        else:
            raise MalformedRecordError(
                f"malformed record {line!r}: unknown record type {tokens[0]!r}")
    if coverage is None:
        raise NetworkIntegrityError("document has no coverage record")
    return RoadNetwork(links=links, coverage=coverage)


def format_network(net: RoadNetwork) -> str:
    """Serialize a network so that ``parse_network`` round-trips it exactly."""
    lines = []
    for link in net.links.values():
        ins = ",".join(sorted(link.in_links))
        lines.append(
            f"link {link.id} length={link.length_m!r} lanes={link.lanes} "
            f"limit={link.speed_limit_kmh!r} in={ins}")
    lines.append("coverage " + ",".join(sorted(net.coverage)))
    return "\n".join(lines) + "\n"


def load_network(path, jam_spacing_m: float = DEFAULT_JAM_SPACING_M) -> RoadNetwork:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_network(fh.read(), jam_spacing_m=jam_spacing_m)


def save_network(net: RoadNetwork, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_network(net))
