"""Structured event log and the independent invariant checkers.

Every run appends protocol messages and state transitions as JSON-line
records (virtual timestamp, actor, event kind, digests). The log is the
input to the checkers below, which reconstruct ledger and contract state
from the logged transactions alone — independent of the runner's
in-memory objects — and to the tamper check (the report pins the log's
SHA-256).

Checkers:
  safety        no two validators commit different blocks at one height;
                no depth-k-confirmed inter tx leaves the canonical chain.
  conservation  replaying every logged value movement ends at exactly the
                genesis total supply.
  payment       a seller payment exists iff its contract replayed to PAID
                iff both commit calls precede the settlement; one payout
                per contract.
  privacy       no 8-byte substring of any private payload appears in
                inter-ledger block bytes or cross-domain message bytes.
"""

from __future__ import annotations

import hashlib
import json

from . import contract as sc
from .contract import BrokerStatus


class EventLog:
    def __init__(self):
        self.events: list[dict] = []

    def emit(self, kind: str, **fields) -> None:
        rec = {"kind": kind}
        rec.update(fields)
        self.events.append(rec)

    def serialize(self) -> bytes:
        lines = [json.dumps(e, sort_keys=True, separators=(",", ":")) for e in self.events]
        return ("\n".join(lines) + "\n").encode()

    def digest_hex(self) -> str:
        return hashlib.sha256(self.serialize()).hexdigest()

    def write(self, path: str) -> str:
        data = self.serialize()
        with open(path, "wb") as f:
            f.write(data)
        return hashlib.sha256(data).hexdigest()


def log_digest(path: str) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def load_events(path: str) -> tuple[list[dict], str]:
    with open(path, "rb") as f:
        data = f.read()
    digest = hashlib.sha256(data).hexdigest()
    events = [json.loads(line) for line in data.decode().splitlines() if line]
    return events, digest


# -- checkers ----------------------------------------------------------------

def check_safety(events: list[dict]) -> list[str]:
    violations = []
    commits: dict[tuple, set] = {}
    for e in events:
        if e["kind"] == "intra_commit":
            commits.setdefault((e["zone"], e["height"]), set()).add(e["block"])
        elif e["kind"] == "inter_revert_confirmed":
            violations.append(f"confirmed inter tx reverted at {e['at']}: {e['txs']}")
    for (zone, height), blocks in sorted(commits.items()):
        if len(blocks) > 1:
            violations.append(f"conflicting commits in zone {zone} at height {height}: {sorted(blocks)}")
    return violations


def _logged_checkpoint(tx: dict):
    from .chain import Checkpoint
    return Checkpoint(tx.get("cp_zone", 0), bytes.fromhex(tx.get("cp_ref", "00" * 32)),
                      tx.get("cp_height", 0), bytes.fromhex(tx.get("cp_head", "00" * 32)))


def _replay_inter(events: list[dict]):
    """Re-execute the logged canonical chain; returns (balances, contracts, facts).

    facts[cid] = {"settles": n, "paid": bool, "dual_commit_at_settle": bool,
                  "payout_to": hex, "payout_amount": int}
    """
    genesis = next(e for e in events if e["kind"] == "genesis")
    balances: dict[str, int] = dict(genesis["inter_balances"])
    reward = genesis.get("block_reward", 0)
    minted = 0
    contracts: dict[int, sc.BrokerInfo] = {}
    for c in genesis["contracts"]:
        contracts[c["cid"]] = sc.BrokerInfo(
            contract_id=c["cid"],
            admin=bytes.fromhex(c["admin"]),
            delegation_list=tuple(bytes.fromhex(a) for a in c["delegation"]),
        )
    blocks_by_digest = {e["block"]: e for e in events if e["kind"] == "inter_block"}
    canonical = next((e for e in events if e["kind"] == "inter_canonical"), None)
    order = canonical["blocks"] if canonical else []
    facts: dict[int, dict] = {}

    def bal(a: str) -> int:
        return balances.get(a, 0)

    for bd in order:
        be = blocks_by_digest.get(bd)
        if be is None:
            continue  # genesis
        miner = be["miner"]
        if reward:
            balances[miner] = bal(miner) + reward
            minted += reward
        for tx in be["txs"]:
            sender, fee, attached = tx["sender"], tx["fee"], tx["attached"]
            if bal(sender) < fee + attached:
                continue
            balances[sender] = bal(sender) - fee - attached
            balances[miner] = bal(miner) + fee
            method, cid = tx["method"], tx["cid"]
            caller = bytes.fromhex(sender)
            try:
                if method == "transfer":
                    to = tx["args"][:40]
                    balances[to] = bal(to) + attached
                elif method == "noop":
                    balances[sender] = bal(sender) + attached
                elif method in ("configure_publisher", "configure_subscriber",
                                "commit_service", "settle_payment", "replace_delegate"):
                    info = contracts.get(cid)
                    if info is None:
                        balances[sender] = bal(sender) + attached
                        continue
                    if method == "configure_publisher":
                        cp = _logged_checkpoint(tx)
                        contracts[cid] = sc.configure_publisher(info, caller, cp, bytes.fromhex(tx["args"]))
                        balances[sender] = bal(sender) + attached
                    elif method == "configure_subscriber":
                        cp = _logged_checkpoint(tx)
                        contracts[cid] = sc.configure_subscriber(info, caller, cp, bytes.fromhex(tx["args"]), attached)
                    elif method == "commit_service":
                        contracts[cid] = sc.commit_service(info, caller)
                        balances[sender] = bal(sender) + attached
                    elif method == "settle_payment":
                        dual = info.pub_committed and info.sub_committed
                        new, payee, amount = sc.settle_payment(info, caller)
                        contracts[cid] = new
                        payee_hex = payee.hex()
                        balances[payee_hex] = bal(payee_hex) + amount
                        balances[sender] = bal(sender) + attached
                        f = facts.setdefault(cid, {"settles": 0})
                        f["settles"] += 1
                        f["paid"] = True
                        f["dual_commit_at_settle"] = dual
                        f["payout_to"] = payee_hex
                        f["payout_amount"] = amount
                    else:
                        args = bytes.fromhex(tx["args"])
                        contracts[cid] = sc.replace_delegate(info, caller, args[:20], args[20:40])
                        balances[sender] = bal(sender) + attached
                else:
                    balances[sender] = bal(sender) + attached
            except sc.ContractError:
                balances[sender] = bal(sender) + attached
    return balances, contracts, facts, minted


def _replay_intra(events: list[dict]):
    """Re-apply logged zone transfers; returns (books, applied transfers)."""
    genesis = next(e for e in events if e["kind"] == "genesis")
    books = {zone: dict(b) for zone, b in genesis["intra_balances"].items()}
    applied: list[dict] = []
    seen_blocks = set()
    for e in events:
        if e["kind"] != "intra_block":
            continue
        key = (e["zone"], e["height"], e["block"])
        if key in seen_blocks:
            continue
        seen_blocks.add(key)
        book = books.setdefault(str(e["zone"]), {})
        for t in e.get("transfers", []):
            frm, to, amount = t["frm"], t["to"], t["amount"]
            if book.get(frm, 0) < amount:
                continue
            book[frm] = book.get(frm, 0) - amount
            book[to] = book.get(to, 0) + amount
            applied.append({"zone": e["zone"], **t})
    return books, applied


def check_conservation(events: list[dict]) -> tuple[int, list[str]]:
    genesis = next(e for e in events if e["kind"] == "genesis")
    initial = genesis["total_supply"]
    balances, contracts, _, minted = _replay_inter(events)
    books, _ = _replay_intra(events)
    total = sum(balances.values())
    total += sum(c.escrow for c in contracts.values())
    for book in books.values():
        total += sum(book.values())
    delta = total - initial - minted
    violations = []
    if delta != 0:
        violations.append(f"conservation delta {delta} (replayed {total} vs initial {initial})")
    for a, v in balances.items():
        if v < 0:
            violations.append(f"negative inter balance for {a}: {v}")
    return delta, violations


def check_payment_safety(events: list[dict]) -> list[str]:
    violations = []
    _, contracts, facts, _minted = _replay_inter(events)
    _, transfers = _replay_intra(events)
    # Seller payments are transfers tagged with the contract id (memo != 0).
    payments: dict[int, list[dict]] = {}
    for t in transfers:
        if t["memo"]:
            payments.setdefault(t["memo"], []).append(t)
    for cid, plist in sorted(payments.items()):
        f = facts.get(cid, {})
        if not f.get("paid"):
            violations.append(f"payment for contract {cid} without a settled (PAID) contract")
        if len(plist) > 1:
            violations.append(f"double payout for contract {cid}: {len(plist)} payments")
        if not f.get("dual_commit_at_settle", True):
            violations.append(f"contract {cid} settled without dual commitment")
    for cid, f in sorted(facts.items()):
        if f.get("settles", 0) > 1:
            violations.append(f"contract {cid} settled {f['settles']} times")
    for cid, info in sorted(contracts.items()):
        if info.broker_status == BrokerStatus.PAID and info.escrow != 0:
            violations.append(f"contract {cid} PAID with nonzero escrow {info.escrow}")
        if info.broker_status == BrokerStatus.COMMITTED and not (info.pub_committed and info.sub_committed):
            violations.append(f"contract {cid} COMMITTED without both commit flags")
    return violations


def payload_windows(events: list[dict], width: int = 8) -> set:
    """8-byte windows of every logged private payload.

    Structured transfer payloads are excluded: they embed public account
    identifiers (which legitimately appear on the inter ledger), not
    private service data.
    """
    from .chain import parse_transfer
    windows = set()
    for e in events:
        if e["kind"] == "intra_submit" and "payload" in e:
            p = bytes.fromhex(e["payload"])
            if parse_transfer(p) is not None:
                continue
            for i in range(len(p) - width + 1):
                windows.add(p[i:i + width])
    return windows


def check_privacy(events: list[dict], width: int = 8) -> list[str]:
    windows = payload_windows(events, width)
    if not windows:
        return []
    violations = []
    for e in events:
        blob_hex = None
        where = None
        if e["kind"] == "inter_block" and "bytes" in e:
            blob_hex, where = e["bytes"], f"inter block {e['block'][:16]}"
        elif e["kind"] == "xdom":
            blob_hex, where = e["bytes"], f"message {e['src']}->{e['dst']}"
        if blob_hex is None:
            continue
        blob = bytes.fromhex(blob_hex)
        for i in range(len(blob) - width + 1):
            if blob[i:i + width] in windows:
                violations.append(f"private payload bytes leaked in {where} at offset {i}")
                break
    return violations


def run_all_checkers(events: list[dict]) -> tuple[int, list[str]]:
    violations = list(check_safety(events))
    delta, cons = check_conservation(events)
    violations += cons
    violations += check_payment_safety(events)
    violations += check_privacy(events)
    return delta, violations
