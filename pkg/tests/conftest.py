import json

import pytest

from lsast import IndexKind, MockGateway, OfflineEmbedder, ReportCorpus, VectorIndex


@pytest.fixture
def report_dicts():
    return [
        {
            "id": 1,
            "title": "SQL injection in user search",
            "severity_rating": "high",
            "cve_ids": ["CVE-2020-1111"],
            "cwe-id": "CWE-89",
            "cwe-title": "SQL Injection",
            "vulnerability_information": (
                "The search endpoint concatenates user input into a query.\n"
                "```php\n$q = \"SELECT * FROM t WHERE a = '\" . $_GET['a'] . \"'\";\n```\n"
                "Exploitable by any authenticated user."
            ),
        },
        {
            "id": 2,
            "title": "Stored XSS in profile page",
            "severity_rating": "medium",
            "cve_ids": [],
            "cwe-id": "CWE-79",
            "cwe-title": "Cross-site Scripting",
            "vulnerability_information": (
                "The profile page echoes the display name unencoded.\n"
                "```php\necho $_GET['name'];\n```"
            ),
        },
        {
            "id": 3,
            "title": "Path traversal in download handler",
            "severity_rating": "low",
            "cve_ids": ["CVE-2019-2222"],
            "cwe-id": "CWE-22",
            "cwe-title": "Path Traversal",
            "vulnerability_information": (
                "The download endpoint accepts ../ sequences in the filename "
                "parameter and serves files outside the intended directory."
            ),
        },
    ]


@pytest.fixture
def corpus(tmp_path, report_dicts):
    source = tmp_path / "reports.json"
    source.write_text(json.dumps(report_dicts), encoding="utf-8")
    corpus = ReportCorpus(tmp_path / "corpus")
    corpus.ingest_reports(source)
    corpus.build_snippet_catalog(llm=MockGateway())
    return corpus


@pytest.fixture
def embedder():
    return OfflineEmbedder()


@pytest.fixture
def indexes(corpus, embedder):
    gateway = MockGateway()
    functionality, _ = VectorIndex.build(
        corpus, IndexKind.FUNCTIONALITY, llm=gateway, embedder=embedder
    )
    abstraction, _ = VectorIndex.build(
        corpus, IndexKind.ABSTRACTION, llm=gateway, embedder=embedder
    )
    return functionality, abstraction


@pytest.fixture
def js_target(tmp_path):
    target = tmp_path / "handler.js"
    target.write_text(
        "var db = require('../models')\n"
        "\n"
        "module.exports.search = function (req, res) {\n"
        "\tvar q = \"SELECT id FROM Users WHERE login='\" + req.body.login + \"'\";\n"
        "\tdb.sequelize.query(q).then(u => res.send(u));\n"
        "}\n",
        encoding="utf-8",
    )
    return target


@pytest.fixture
def sast_record():
    return [
        {
            "cwe_ids": ["943"],
            "id": "javascript_lang_sql_injection",
            "title": "Unsanitized input in SQL query",
            "description": "Query built from request input.",
            "full_filename": "handler.js",
            "source": {"start": 4, "end": 5},
        }
    ]
