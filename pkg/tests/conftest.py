from commshim.channels import build_comm_table
from commshim.endpoints import Node
from commshim.loop import TaskLoop
from commshim.transport import SimFabric


def sim_world(n, link=None, **fabric_kw):
    """One loop plus an n-rank simulated world sharing its virtual clock."""
    loop = TaskLoop()
    fabric = SimFabric(n, link=link, clock=loop.clock, **fabric_kw)
    transports = [fabric.transport(r) for r in range(n)]
    tables = [build_comm_table(t) for t in transports]
    return loop, fabric, transports, tables


def sim_nodes(n, link=None, max_chunk=None, cache_capacity=None, **fabric_kw):
    loop = TaskLoop()
    fabric = SimFabric(n, link=link, clock=loop.clock, **fabric_kw)
    nodes = []
    for rank in range(n):
        transport = fabric.transport(rank)
        table = build_comm_table(transport, cache_capacity=cache_capacity)
        nodes.append(Node(transport, table, max_chunk=max_chunk))
    return loop, nodes
