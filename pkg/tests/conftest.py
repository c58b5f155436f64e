import numpy as np
import pytest

from eatvul.corpus import NONVULNERABLE, VULNERABLE, CodeSample, build_vocab, split, tokenize_all

FILLER = ["a = b + 1;", "if (n > 0) { n--; }", "total = total * 2;", "x = y;",
          "while (i < n) { i++; }", "b = a - c;"]


def memcpy_corpus(n=40, seed=3):
    """Half the functions call memcpy (vulnerable), half do not."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        vuln = i % 2 == 0
        body = [FILLER[k] for k in rng.choice(len(FILLER), 3, replace=False)]
        if vuln:
            body.insert(int(rng.integers(len(body) + 1)), "memcpy(dst, src, n);")
        src = "void f(int n)\n{\n" + "\n".join("    " + s for s in body) + "\n}\n"
        out.append(CodeSample(f"m{i:03d}", src, VULNERABLE if vuln else NONVULNERABLE))
    return out


@pytest.fixture(scope="session")
def memcpy_split():
    samples = memcpy_corpus(60)
    sp = split(samples, 0)
    return sp, build_vocab(tokenize_all(sp.train))


HOST_SRC = """int parse(char *buf, int len)
{
    int val = 0;
    char out[16];
    if (len > 0) {
        val = buf[0];
    }
    strcpy(out, buf);
    return val;
}
"""


@pytest.fixture
def host():
    return CodeSample("host-1", HOST_SRC, VULNERABLE)


class FixtureServer:
    """Local HTTP endpoint that answers POSTs from a script of (status, body) pairs.

    When the script runs out the last entry repeats. Requests are recorded.
    """

    def __init__(self):
        import http.server
        import threading

        self.script = [(200, {})]
        self.requests = []
        self.delay = 0.0
        owner = self

        class Handler(http.server.BaseHTTPRequestHandler):
            def do_POST(self):
                import json
                import time

                body = self.rfile.read(int(self.headers.get("Content-Length", 0)))
                owner.requests.append({"body": json.loads(body),
                                       "auth": self.headers.get("Authorization")})
                idx = min(len(owner.requests) - 1, len(owner.script) - 1)
                status, payload = owner.script[idx]
                if owner.delay:
                    time.sleep(owner.delay)
                data = payload if isinstance(payload, bytes) else json.dumps(payload).encode()
                try:
                    self.send_response(status)
                    self.send_header("Content-Type", "application/json")
                    self.send_header("Content-Length", str(len(data)))
                    self.end_headers()
                    self.wfile.write(data)
                except (BrokenPipeError, ConnectionResetError):
                    pass

            def log_message(self, *args):
                pass

        self.httpd = http.server.ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.httpd.server_address[1]}/"
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self.thread.start()

    def close(self):
        self.httpd.shutdown()
        self.httpd.server_close()


@pytest.fixture
def fixture_server():
    server = FixtureServer()
    yield server
    server.close()


def bow_benchmark(n_pool=6, n_hosts=4, decoy_seed=0):
    """Hand-weighted victim where {s0002, s0005} is the unique flipping pair.

    Half the hosts carry ``grp_a`` (logit 2), half ``grp_b`` (logit 4).
    Snippet s0002 calls a -3.0 token and s0005 a -1.5 token; every other
    snippet's token weighs between -0.1 and -0.4, so no other pair (and no
    singleton) flips the grp_b hosts.
    """
    from eatvul.pool import AttackPool
    from eatvul.snippetgen import Snippet
    from eatvul.targetzoo import BagOfTokensVictim

    rng = np.random.default_rng(decoy_seed)
    hosts = []
    for j in range(n_hosts):
        grp = "grp_a" if j % 2 == 0 else "grp_b"
        src = f"int host_{j}(char *p)\n{{\n    {grp}(p);\n    p++;\n    return 0;\n}}\n"
        hosts.append(CodeSample(f"h{j}", src, VULNERABLE))
    weights = {"grp_a": 2.0, "grp_b": 4.0}
    pool = AttackPool("bench")
    for i in range(1, n_pool + 1):
        tok = f"scrub_{i}"
        weights[tok] = {2: -3.0, 5: -1.5}.get(i, -float(rng.uniform(0.1, 0.4)))
        pool.add(Snippet((f"int q{i} = {tok}(0);",)), hosts[0])
    return pool, hosts, BagOfTokensVictim(weights)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
