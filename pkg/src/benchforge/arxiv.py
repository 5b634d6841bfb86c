"""arXiv-style Atom query client used as a remote :class:`DocumentSource`.

Only metadata and abstracts are available from the Atom API, so every
document gets a single ``abstract`` section.
"""

from __future__ import annotations

import logging
import time
from datetime import datetime
from typing import Callable, Iterator
from urllib.parse import urlencode
from xml.etree import ElementTree as ET

from .corpus import SelectionCriteria
from .serde import format_time, parse_time

logger = logging.getLogger(__name__)

ATOM = "{http://www.w3.org/2005/Atom}"
ARXIV = "{http://arxiv.org/schemas/atom}"
OPENSEARCH = "{http://a9.com/-/spec/opensearch/1.1/}"

DEFAULT_ENDPOINT = "https://export.arxiv.org/api/query"
MIN_PAGE_DELAY = 3.0


def _stamp(dt: datetime) -> str:
    return dt.strftime("%Y%m%d%H%M")


def build_query(criteria: SelectionCriteria) -> str:
    cats = " OR ".join(f"cat:{c}" for c in criteria.categories)
    window = f"submittedDate:[{_stamp(criteria.window_start)} TO {_stamp(criteria.window_end)}]"
    return f"({cats}) AND {window}"


def parse_feed(xml_text: str) -> tuple[list[dict], int]:
    """Parse one Atom page into document records plus the reported total."""
    root = ET.fromstring(xml_text)
    total_el = root.find(f"{OPENSEARCH}totalResults")
    total = int(total_el.text) if total_el is not None and total_el.text else 0
    records = []
    for entry in root.findall(f"{ATOM}entry"):
        raw_id = (entry.findtext(f"{ATOM}id") or "").strip()
        arxiv_id = raw_id.rsplit("/abs/", 1)[-1]
        title = " ".join((entry.findtext(f"{ATOM}title") or "").split())
        summary = " ".join((entry.findtext(f"{ATOM}summary") or "").split())
        authors = [(a.findtext(f"{ATOM}name") or "").strip() for a in entry.findall(f"{ATOM}author")]
        cats = [c.get("term", "") for c in entry.findall(f"{ATOM}category") if c.get("term")]
        published = entry.findtext(f"{ATOM}published") or ""
        records.append({
            "id": arxiv_id,
            "title": title,
            "authors": authors,
            "categories": cats,
            "submitted_at": format_time(parse_time(published)) if published else "",
            "sections": [{"label": "abstract", "text": summary}],
        })
    return records, total


class AtomCatalogSource:
    """Pages through an Atom query endpoint, sleeping between pages.

    ``fetch`` takes a full URL and returns the response body; it defaults to
    a ``requests`` GET and is injectable for tests.
    """

    def __init__(
        self,
        criteria: SelectionCriteria,
        endpoint: str = DEFAULT_ENDPOINT,
        page_size: int = 100,
        delay: float = MIN_PAGE_DELAY,
        max_results: int | None = None,
        fetch: Callable[[str], str] | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.criteria = criteria
        self.endpoint = endpoint
        self.page_size = page_size
        self.delay = max(delay, MIN_PAGE_DELAY)
        self.max_results = max_results
        self._fetch = fetch or self._http_get
        self._sleep = sleep

    @staticmethod
    def _http_get(url: str) -> str:
        import requests

        resp = requests.get(url, timeout=60, headers={"User-Agent": "benchforge/0.1"})
        resp.raise_for_status()
        return resp.text

    def page_urls(self, start: int) -> str:
        params = {
            "search_query": build_query(self.criteria),
            "start": start,
            "max_results": self.page_size,
            "sortBy": "submittedDate",
            "sortOrder": "ascending",
        }
        return f"{self.endpoint}?{urlencode(params)}"

    def records(self) -> Iterator[tuple[str, dict]]:
        start = 0
        while True:
            if start > 0:
                self._sleep(self.delay)
            url = self.page_urls(start)
            records, total = parse_feed(self._fetch(url))
            logger.info("fetched %d records at offset %d (total %d)", len(records), start, total)
            for i, rec in enumerate(records):
                yield f"atom[{start + i}]", rec
            start += len(records)
            if not records or start >= total:
                break
            if self.max_results is not None and start >= self.max_results:
                break
